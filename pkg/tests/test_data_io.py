import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from apcde.base import AugmentedBase, CategoricalHead, LinearGaussianHead
from apcde.checkpoint import (FORMAT_VERSION, MAGIC, Checkpoint, from_bytes, load_checkpoint, save_checkpoint,
                              to_bytes)
from apcde.data import (Dataset, MixtureSpec, XSpec, dequantize, load_dataset, load_digits_8x8, read_pgm,
                        save_dataset, synth_conditional_mixture, to_byte_range, write_pgm)
from apcde.errors import CheckpointError, DataError, SchemaError
from apcde.inference import log_marg_density

from conftest import random_model


# -- dequantisation ---------------------------------------------------------------------

def test_dequantize_cells():
    rng = np.random.default_rng(0)
    lo = dequantize(np.zeros(1000), 8, rng)
    assert np.all((lo > 0) & (lo < 1 / 256))
    hi = dequantize(np.full(1000, 255), 8, rng)
    assert np.all((hi > 255 / 256) & (hi < 1))
    five = dequantize(np.full(1000, 37), 5, rng)
    assert np.all((five >= 32 / 256) & (five < 33 / 256))


def test_dequantize_rejects_out_of_range():
    rng = np.random.default_rng(1)
    with pytest.raises(DataError):
        dequantize([256], 8, rng)
    with pytest.raises(DataError):
        dequantize([-1], 8, rng)
    with pytest.raises(DataError):
        dequantize([1.5], 8, rng)
    with pytest.raises(DataError):
        dequantize([1], 9, rng)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 255), min_size=2, max_size=30), st.integers(1, 8), st.integers(0, 2**31))
def test_dequantize_monotone_shared_noise(values, bits, seed):
    v = np.sort(np.array(values))
    a = dequantize(v, bits, np.random.default_rng(seed))
    # a shared noise draw: the same u for every pixel
    u = np.random.default_rng(seed).uniform(size=1)[0]
    shared = dequantize(v, bits, _ConstRng(u))
    assert np.all(np.diff(shared) >= 0)
    assert np.all((a > 0) & (a < 1))


class _ConstRng:
    def __init__(self, u):
        self.u = u

    def uniform(self, lo, hi, size):
        return np.full(size, self.u)


def test_to_byte_range():
    np.testing.assert_array_equal(to_byte_range([0, 8, 16], 16), [0, 128, 255])


# -- CSV datasets ----------------------------------------------------------------------------

def test_load_small_file(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("y0,y1,label\n0.1,0.2,1\n0.3,0.4,2\n-1,2.5,1\n")
    ds = load_dataset(path, [XSpec.parse("label:categorical:2")])
    assert ds.n == 3 and ds.p == 2
    np.testing.assert_array_equal(ds.x[0], [1, 2, 1])
    assert ds.provenance["source"] == str(path)


def test_load_bad_cell_names_location(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("y0,y1\n0.1,0.2\n0.3,abc\n")
    with pytest.raises(DataError, match=r"d\.csv:3: .*'abc'.*'y1'"):
        load_dataset(path)


def test_load_missing_value_and_columns(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("y0,y1,label\n0.1,,1\n")
    with pytest.raises(DataError, match="missing value"):
        load_dataset(path, [XSpec("label", "categorical", 2)])
    path.write_text("y0,y1\n0.1,0.2\n")
    with pytest.raises(SchemaError):
        load_dataset(path, [XSpec("label", "categorical", 2)])
    path.write_text("y1,y2\n0.1,0.2\n")
    with pytest.raises(SchemaError):
        load_dataset(path)
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nope.csv")


def test_label_out_of_range(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("y0,label\n0.1,3\n")
    with pytest.raises(DataError):
        load_dataset(path, [XSpec("label", "categorical", 2)])


def test_save_load_roundtrip_exact(tmp_path):
    spec = MixtureSpec([[1.0, 0.0, 0.5], [-1.0, 0.0, 0.2]], 0.7, covariate_slope=1.5)
    ds = synth_conditional_mixture(spec, 50, 3)
    path = tmp_path / "d.csv"
    save_dataset(ds, path)
    back = load_dataset(path, ds.schema)
    np.testing.assert_array_equal(back.y, ds.y)
    for a, b in zip(back.x, ds.x):
        np.testing.assert_array_equal(a, b)


def test_xspec_parse():
    assert XSpec.parse("label:categorical:10") == XSpec("label", "categorical", 10)
    assert XSpec.parse("light:continuous:3").columns == ["light0", "light1", "light2"]
    assert XSpec.parse("t:continuous").columns == ["t"]
    with pytest.raises(SchemaError):
        XSpec.parse("label:categorical")
    with pytest.raises(SchemaError):
        XSpec.parse("label:ordinal:3")


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.array([[np.nan]]))
    with pytest.raises(DataError):
        Dataset(np.zeros((0, 2)))
    with pytest.raises(SchemaError):
        Dataset(np.zeros((2, 2)), [np.array([1, 2])])


# -- synthetic mixture ---------------------------------------------------------------------

def test_bayes_error():
    spec = MixtureSpec([[2.0, 0.0], [-2.0, 0.0]], 1.0)
    assert spec.bayes_error() == pytest.approx(stats.norm.cdf(-2.0), abs=1e-15)
    assert spec.bayes_error() == pytest.approx(0.02275, abs=1e-5)
    ds = synth_conditional_mixture(spec, 10, 0)
    assert ds.provenance["bayes_error"] == spec.bayes_error()
    assert ds.provenance["seed"] == 0


def test_zero_sigma_limit():
    ds = synth_conditional_mixture(MixtureSpec([[1.0, 2.0], [3.0, 4.0]], 0.0), 20, 1)
    for k in (1, 2):
        assert np.all(ds.y[ds.x[0] == k] == [[1.0, 2.0], [3.0, 4.0]][k - 1])


def test_class_frequencies_binomial():
    probs = np.array([0.2, 0.5, 0.3])
    n = 10_000
    ds = synth_conditional_mixture(MixtureSpec(np.eye(3), 1.0, probs), n, 2)
    counts = np.bincount(ds.x[0], minlength=4)[1:]
    assert np.all(np.abs(counts - n * probs) <= 3 * np.sqrt(n * probs * (1 - probs)))


def test_generator_reproducible():
    spec = MixtureSpec([[0.0], [1.0]], 0.3, covariate_slope=2.0)
    a, b = synth_conditional_mixture(spec, 30, 9), synth_conditional_mixture(spec, 30, 9)
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(a.x[1], b.x[1])
    assert a.schema[1].kind == "continuous"


def test_mixture_spec_validation():
    with pytest.raises(DataError):
        MixtureSpec([[0.0], [1.0]], 1.0, probs=[0.3, 0.3])
    with pytest.raises(DataError):
        MixtureSpec([[0.0], [1.0]], -1.0)


def test_digits_loader():
    tr, te = load_digits_8x8(seed=0)
    assert tr.p == 64 and te.n == 200 and tr.n + te.n == 1797
    assert tr.y.min() > 0 and tr.y.max() < 1
    assert set(np.unique(tr.x[0])) == set(range(1, 11))
    tr2, _ = load_digits_8x8(seed=0)
    np.testing.assert_array_equal(tr.y, tr2.y)


# -- PGM ---------------------------------------------------------------------------------

def test_pgm_roundtrip(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4)
    path = tmp_path / "a.pgm"
    write_pgm(path, img)
    back = read_pgm(path)
    assert back.shape == (3, 4)
    np.testing.assert_array_equal(back, np.rint(img * 255).astype(np.uint8))
    assert path.read_bytes().startswith(b"P5\n4 3\n255\n")


# -- checkpoints ---------------------------------------------------------------------------------

def _checkpoint(seed=0):
    rng = np.random.default_rng(seed)
    model = random_model(8, rng, n_levels=2, head_widths=[2, 1])
    model.layout = model.layout_from_levels([(1, 0, 2), (0, 1, 1)])
    base = AugmentedBase([CategoricalHead(3, 2, temper=10.0, weight=rng.normal(size=(2, 2))),
                          LinearGaussianHead(2, 1, pin_variance=True, variance=[0.01, 0.5],
                                             loading=rng.normal(size=(2, 1)))])
    schema = [XSpec("label", "categorical", 3), XSpec("light", "continuous", width=2)]
    return Checkpoint(model, base, schema, {"epochs": 3}, [1.5, 1.25], {"note": "x"})


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    ck = _checkpoint()
    path = tmp_path / "m.ckpt"
    save_checkpoint(ck, path)
    back = load_checkpoint(path)
    for k, v in ck.tensors().items():
        np.testing.assert_array_equal(back.tensors()[k], v)
    assert back.schema == ck.schema and back.config == ck.config and back.loss_trace == ck.loss_trace
    assert back.base.heads[0].temper == 10.0 and back.base.heads[1].pinned == ("log_variance",)
    assert back.model.layout.origins == ck.model.layout.origins
    y = np.random.default_rng(1).normal(size=(10, 8))
    assert np.array_equal(log_marg_density(back.model, back.base, y), log_marg_density(ck.model, ck.base, y))
    save_checkpoint(back, tmp_path / "m2.ckpt")
    assert (tmp_path / "m2.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_header_layout():
    data = to_bytes(_checkpoint())
    assert data[:8] == MAGIC
    assert int.from_bytes(data[8:12], "little") == FORMAT_VERSION


def test_checkpoint_tamper_detected():
    data = bytearray(to_bytes(_checkpoint()))
    data[len(data) // 2] ^= 0x01
    with pytest.raises(CheckpointError, match="integrity"):
        from_bytes(bytes(data))


def test_checkpoint_truncation_detected():
    data = to_bytes(_checkpoint())
    with pytest.raises(CheckpointError):
        from_bytes(data[:-100])
    with pytest.raises(CheckpointError):
        from_bytes(data[:10])


def test_checkpoint_version_mismatch():
    import hashlib

    data = bytearray(to_bytes(_checkpoint()))
    data[8:12] = (FORMAT_VERSION + 1).to_bytes(4, "little")
    body = bytes(data[:-32])
    with pytest.raises(CheckpointError, match="version"):
        from_bytes(body + hashlib.sha256(body).digest())


def test_checkpoint_bad_magic_and_missing(tmp_path):
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(b"NOTACKPT" + bytes(100))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_redequantize_keeps_cells():
    tr, _ = load_digits_8x8(seed=0)
    assert tr.pixels is not None and tr.bit_depth == 5
    fresh = tr.redequantize(np.random.default_rng(3))
    assert not np.array_equal(fresh, tr.y)
    np.testing.assert_array_equal(np.floor(fresh * 256), np.floor(tr.y * 256))
    sub = tr.subset([0, 5])
    np.testing.assert_array_equal(sub.pixels, tr.pixels[[0, 5]])
    assert tr.without_covariates().pixels is tr.pixels
    with pytest.raises(DataError):
        synth_conditional_mixture(MixtureSpec([[0.0], [1.0]], 1.0), 5, 0).redequantize(np.random.default_rng(0))
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 2)), pixels=np.zeros((2, 3)), bit_depth=8)
