import numpy as np
import pytest

from conftest import unit_rows
from iscmatch.descriptor import Projector, random_projector
from iscmatch.errors import ArgumentError, FormatError, LengthError
from iscmatch.imaging import make_synthetic_dataset, make_training_images
from iscmatch.learning.gradcheck import numeric_gradient, relative_error
from iscmatch.learning.losses import nt_xent_loss
from iscmatch.learning.projector import (
    dumps_projector,
    loads_projector,
    pair_features,
    projected_loss_and_grad,
    train_projector,
)
from iscmatch.metrics import GroundTruth, micro_average_precision
from iscmatch.pipeline import PipelineConfig, run_on_images
from iscmatch.rng import Rng64


@pytest.fixture(scope="module")
def images():
    return list(make_training_images(64, 8).values())


def test_pair_features_layout(images):
    feats = pair_features(images[:5], Rng64(0))
    assert feats.shape == (10, 96)
    assert np.all((feats >= 0) & (feats <= 1))


@pytest.mark.parametrize("seed", range(5))
def test_gradient_through_normalization(seed):
    gen = np.random.default_rng(seed)
    feats = gen.random((8, 12))
    p = gen.standard_normal((5, 12))

    def loss(m):
        x = feats @ m.T
        return nt_xent_loss(x / np.linalg.norm(x, axis=1, keepdims=True), 0.3)

    value, grad = projected_loss_and_grad(p, feats, 0.3)
    assert value == pytest.approx(loss(p), abs=1e-14)
    assert relative_error(grad, numeric_gradient(loss, p, 1e-6)) < 1e-6


def test_lr_zero_keeps_projector(images):
    init = random_projector(16, 96, 1)
    trained, log = train_projector(images, Rng64(2), epochs=3, lr=0.0, batch=8, d=16, init=init)
    assert np.array_equal(trained.matrix, init.matrix)
    assert len(set(log.epoch_losses)) == 1


def test_deterministic_and_decreasing(images):
    a, la = train_projector(images, Rng64(3), epochs=10, lr=1.0, batch=16, d=32)
    b, lb = train_projector(images, 3, epochs=10, lr=1.0, batch=16, d=32)
    assert np.array_equal(a.matrix, b.matrix) and la.epoch_losses == lb.epoch_losses
    assert la.final < la.initial
    assert np.all(np.isfinite(la.epoch_losses))


def test_insufficient_images(images):
    with pytest.raises(ArgumentError):
        train_projector(images[:15], Rng64(0), batch=8)


def test_trained_projector_helps_retrieval():
    ds = make_synthetic_dataset(60, 40, 10, 5)
    train = list(make_training_images(200, 6).values())
    proj, _ = train_projector(train, Rng64(0), epochs=30, lr=2.0, batch=50)
    cfg = PipelineConfig(matcher="baseline")
    gt = GroundTruth(ds.ground_truth)
    trained_preds, _, _ = run_on_images(cfg, ds.queries, ds.refs, projector=proj)
    random_preds, _, _ = run_on_images(cfg, ds.queries, ds.refs)
    assert micro_average_precision(trained_preds, gt) >= micro_average_precision(random_preds, gt)


def test_iscp_round_trip():
    p = Projector(unit_rows(np.random.default_rng(0), 4, 6))
    data = dumps_projector(p)
    assert data[:4] == b"ISCP" and len(data) == 16 + 4 * 24
    back = loads_projector(data)
    np.testing.assert_array_equal(back.matrix, p.matrix.astype(np.float32))
    with pytest.raises(FormatError):
        loads_projector(b"ISCM" + data[4:])
    with pytest.raises(LengthError):
        loads_projector(data[:-1])
