from collections import OrderedDict

import numpy as np
import pytest

from oracles import clustered_positions
from paaconv.data import Block
from paaconv.exceptions import ConfigError, InvalidInputError, ShapeError
from paaconv.network import build_network
from paaconv.training import TrainConfig, sgd_momentum_step, train, write_history

TINY = dict(in_channels=3, n_classes=3, cascade_strides=(1, 2), cascade_channels=(4, 4),
            parallel_strides=(2, 4), parallel_channels=(3, 3), cell_size=0.25)


def _params(w):
    return OrderedDict(w=np.array([w]))


def test_plain_sgd_step():
    p, v = _params(1.0), _params(0.0)
    sgd_momentum_step(p, v, _params(2.0), 0.1, 0.0)
    assert p["w"][0] == pytest.approx(0.8, abs=1e-15)


def test_momentum_two_steps():
    p, v = _params(1.0), _params(0.0)
    sgd_momentum_step(p, v, _params(1.0), 0.1, 0.9)
    assert (v["w"][0], p["w"][0]) == (pytest.approx(1.0), pytest.approx(0.9))
    sgd_momentum_step(p, v, _params(1.0), 0.1, 0.9)
    assert (v["w"][0], p["w"][0]) == (pytest.approx(1.9), pytest.approx(0.71))


def test_zero_gradient_decays_geometrically():
    p, v = _params(0.0), _params(1.0)
    for _ in range(200):
        sgd_momentum_step(p, v, _params(0.0), 0.1, 0.9)
    # w -> -lr * v0 * mu / (1 - mu)
    assert v["w"][0] == pytest.approx(0.9 ** 200)
    assert p["w"][0] == pytest.approx(-0.1 * 0.9 / 0.1, rel=1e-6)


def test_step_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_momentum_step(_params(1.0), _params(0.0), OrderedDict(w=np.zeros(2)), 0.1, 0.9)


def _blocks(rng, count=3, n=20):
    out = []
    for _ in range(count):
        pos = clustered_positions(rng, n)
        out.append(Block(pos, rng.normal(size=(n, 3)), rng.integers(0, 3, n), np.arange(n)))
    return out


def test_zero_learning_rate_keeps_parameters(rng):
    net = build_network(**TINY)
    before = {k: v.copy() for k, v in net.params.items()}
    train(net, _blocks(rng, count=1), TrainConfig(learning_rate=0.0, epochs=3))
    for k, v in net.params.items():
        np.testing.assert_array_equal(v, before[k])


def test_training_is_deterministic(rng):
    blocks = _blocks(rng)
    cfg = TrainConfig(epochs=3, batch_size=2, seed=11)
    a, b = build_network(**TINY), build_network(**TINY)
    ha = train(a, blocks, cfg).history
    hb = train(b, blocks, cfg).history
    assert a.to_bytes() == b.to_bytes()
    assert ha == hb


def test_small_step_descends(rng):
    net = build_network(**TINY)
    block = _blocks(rng, count=1)[0]
    loss0, grads, _ = net.loss_and_grads(block.positions, block.features, block.labels)
    velocity = OrderedDict((k, np.zeros_like(v)) for k, v in net.params.items())
    sgd_momentum_step(net.params, velocity, grads, 1e-4, 0.9)
    loss1, _, _ = net.loss_and_grads(block.positions, block.features, block.labels)
    assert loss1 < loss0


def test_history_and_resume(rng, tmp_path):
    blocks = _blocks(rng)
    net = build_network(**TINY)
    seen = []
    state = train(net, blocks, TrainConfig(epochs=2, batch_size=2), on_epoch_end=lambda s: seen.append(s.epoch))
    assert seen == [1, 2]
    assert [h.epoch for h in state.history] == [1, 2]
    assert all(h.mean_loss > 0 and 0 <= h.train_oa <= 1 for h in state.history)
    write_history(tmp_path / "h.csv", state.history)
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,mean_loss,train_oa" and len(lines) == 3

    # two epochs, then one more from the saved state, matches three straight epochs
    straight = build_network(**TINY)
    train(straight, blocks, TrainConfig(epochs=3, batch_size=2))
    train(net, blocks, TrainConfig(epochs=3, batch_size=2), state=state)
    assert net.to_bytes() == straight.to_bytes()


def test_unlabeled_point_is_named(rng):
    blocks = _blocks(rng)
    blocks[1].labels[5] = -1
    with pytest.raises(InvalidInputError, match="block 1, point 5"):
        train(build_network(**TINY), blocks, TrainConfig(epochs=1))


@pytest.mark.parametrize("bad", [dict(momentum=1.0), dict(learning_rate=-1.0), dict(batch_size=0),
                                 dict(epochs=0), dict(lr_decay=0.0)])
def test_bad_config(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad).validate()


def test_step_decay():
    cfg = TrainConfig(learning_rate=0.1, lr_decay=0.5, lr_decay_every=2)
    assert [cfg.lr_at(e) for e in range(5)] == [0.1, 0.1, 0.05, 0.05, 0.025]
