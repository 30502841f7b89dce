import numpy as np
import pytest

from amerlab import synthgen as sg
from amerlab.errors import CorpusTooSmall, FormatError
from amerlab.tensor_core import gelu, normalize


def test_standard_gaussian_moments():
    x = sg.sample_inputs(sg.InputDistribution(sg.Dist.STANDARD_GAUSSIAN), 10000, 64, 0)
    assert np.all(np.abs(x.mean(axis=0)) < 0.05)
    assert np.all((x.var(axis=0) > 0.9) & (x.var(axis=0) < 1.1))


def test_high_variance_gaussian():
    x = sg.sample_inputs(sg.InputDistribution(sg.Dist.HIGH_VAR_GAUSSIAN), 10000, 64, 1)
    assert 3.6 < x.var() < 4.4


def test_uniform_cube_bounds():
    x = sg.sample_inputs(sg.InputDistribution(sg.Dist.UNIFORM_CUBE), 500, 16, 2)
    assert x.min() >= -2 and x.max() <= 2


def test_correlated_covariance_spd():
    cov = sg.correlated_covariance(32, 0)
    np.testing.assert_allclose(cov, cov.T)
    assert np.linalg.eigvalsh(cov).min() >= 0.1 - 1e-12


def test_linear_transforms():
    ts = sg.make_transforms("linear", 16, 0)
    x = np.random.default_rng(0).standard_normal(16)
    np.testing.assert_array_equal(ts[0].apply(x), x)
    np.testing.assert_allclose(ts[1].apply(x) + ts[3].apply(x), 0, atol=1e-12)
    np.testing.assert_allclose(ts[2].apply(x) + ts[4].apply(x), 0, atol=1e-12)


def test_mlp_transforms_frobenius_orthogonal():
    ts = sg.make_transforms("mlp", 64, 0)
    ma, mb, mc = (t.weights[0] for t in ts[:3])
    for a, b in ((ma, mb), (ma, mc), (mb, mc)):
        assert sg.frobenius_overlap(a, b) < 0.05
    np.testing.assert_array_equal(ts[3].weights[0], -mb)
    np.testing.assert_array_equal(ts[4].weights[0], -mc)


def test_apply_transform_examples():
    ident = sg.TransformSpec(sg.TransformKind.LINEAR, 1, (np.eye(3),))
    np.testing.assert_array_equal(ident.apply([1.0, 2.0, 3.0]), [1, 2, 3])
    rot = sg.TransformSpec(sg.TransformKind.LINEAR, 2, (np.array([[0.0, -1.0], [1.0, 0.0]]),))
    np.testing.assert_allclose(rot.apply([1.0, 0.0]), [0.0, 1.0])
    mlp = sg.TransformSpec(sg.TransformKind.MLP, 1, (np.eye(2), np.eye(2)))
    np.testing.assert_allclose(mlp.apply([1.0, -1.0]), [0.8413447, -0.1586553], atol=1e-7)


def test_dataset_counts_and_ood_split():
    splits, pool, *_ = sg.build_dataset("ood", "mlp", 200, 20, 8, 5, 0)
    assert pool.shape == (1100, 8)
    assert set(splits[sg.Split.TEST].dists.tolist()) == {sg.Dist.LAPLACE_PLUS_GAUSSIAN}
    assert sg.Dist.LAPLACE_PLUS_GAUSSIAN not in set(splits[sg.Split.TRAIN].dists.tolist())
    assert len(splits[sg.Split.VAL]) == 20 and len(splits[sg.Split.TRAIN]) == 180


def test_multi_uses_all_distributions():
    splits, *_ = sg.build_dataset("multi", "linear", 50, 10, 4, 2, 0)
    assert set(splits[sg.Split.TEST].dists.tolist()) == set(range(5))
    single, *_ = sg.build_dataset("single", "linear", 50, 10, 4, 2, 0)
    assert set(single[sg.Split.TRAIN].dists.tolist()) == {sg.Dist.STANDARD_GAUSSIAN}


def test_corpus_counts():
    pool = np.random.default_rng(0).standard_normal((110, 4))
    corpus, ids = sg.build_corpus(pool, 200, 4, 0)
    assert len(corpus) == 200 and int(np.sum(corpus.tag_kind == 1)) == 90
    np.testing.assert_allclose(np.linalg.norm(corpus.vectors.astype(np.float64), axis=1), 1, atol=1e-6)
    with pytest.raises(CorpusTooSmall):
        sg.build_corpus(pool, 100, 4, 0)


def test_target_ids_resolve_to_normalized_targets(tiny_data):
    for ds in tiny_data.splits.values():
        ids = ds.target_ids
        assert all(len(set(r)) == ds.m for r in ids.tolist())
        np.testing.assert_allclose(tiny_data.corpus.vectors[ids], ds.unit_targets(), atol=1e-6)


def test_linear_family_structure():
    g = sg.generate("multi", "linear", 100, 20, 8, 5, 1000, 3)
    ds = g.splits[sg.Split.TRAIN]
    t = ds.targets.astype(np.float64)
    np.testing.assert_allclose(t[:, 0], ds.inputs, atol=1e-5)
    np.testing.assert_allclose(t[:, 1], -t[:, 3], atol=1e-5)
    np.testing.assert_allclose(t[:, 2], -t[:, 4], atol=1e-5)
    u = normalize(t)
    sims = np.einsum("nid,njd->nij", u, u)
    iu = np.triu_indices(5, 1)
    assert np.all(sims[:, iu[0], iu[1]].mean(axis=1) <= 0)


def test_file_round_trip_and_determinism(tmp_path, tiny_data):
    ds = tiny_data.splits[sg.Split.TEST]
    sg.write_dataset(tmp_path / "a.ds", ds)
    back = sg.read_dataset(tmp_path / "a.ds", first_query_id=int(ds.query_ids[0]))
    np.testing.assert_array_equal(back.inputs, ds.inputs)
    np.testing.assert_array_equal(back.targets, ds.targets)
    np.testing.assert_array_equal(back.target_ids, ds.target_ids)
    np.testing.assert_array_equal(back.query_ids, ds.query_ids)
    assert back.setting == ds.setting and back.kind == ds.kind

    sg.write_corpus(tmp_path / "c.bin", tiny_data.corpus)
    c = sg.read_corpus(tmp_path / "c.bin")
    np.testing.assert_array_equal(c.vectors, tiny_data.corpus.vectors)
    np.testing.assert_array_equal(c.tag_query, tiny_data.corpus.tag_query)

    sg.write_transforms(tmp_path / "t.bin", tiny_data.transforms, tiny_data.distributions)
    ts, extra = sg.read_transforms(tmp_path / "t.bin")
    for a, b in zip(ts, tiny_data.transforms):
        for wa, wb in zip(a.weights, b.weights):
            np.testing.assert_array_equal(wa, wb)
    assert "dist2.chol" in extra

    again = sg.generate("multi", "mlp", 60, 20, 8, 3, 600, 7)
    sg.write_dataset(tmp_path / "b.ds", again.splits[sg.Split.TEST])
    assert (tmp_path / "a.ds").read_bytes() == (tmp_path / "b.ds").read_bytes()


def test_corrupt_files_raise_format_error(tmp_path, tiny_data):
    path = tmp_path / "x.ds"
    sg.write_dataset(path, tiny_data.splits[sg.Split.TEST])
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(FormatError):
        sg.read_dataset(path)
    path.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(FormatError):
        sg.read_dataset(path)
