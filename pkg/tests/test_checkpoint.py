import numpy as np
import pytest

from fortnet.checkpoint import (CheckpointError, load_params, restore_params,
                                save_params)
from fortnet.layers import Activation, Dense, FortifiedNetwork
from fortnet.tensor import Tensor


def test_round_trip_is_lossless(tmp_path, rng):
    params = [("a", Tensor(rng.normal(size=(3, 4)))),
              ("b", Tensor(rng.normal(size=7)))]
    path = tmp_path / "ckpt.npz"
    save_params(path, params)
    loaded = load_params(path)
    for name, p in params:
        assert np.array_equal(loaded[name], p.data)


def test_restore_into_network(tmp_path, rng):
    net = FortifiedNetwork([Dense(3, 5, rng), Activation("relu"),
                            Dense(5, 2, rng)], {})
    path = tmp_path / "ckpt.npz"
    save_params(path, net.params())
    net2 = FortifiedNetwork([Dense(3, 5, np.random.default_rng(99)),
                             Activation("relu"),
                             Dense(5, 2, np.random.default_rng(99))], {})
    restore_params(net2.params(), load_params(path))
    x = Tensor(rng.normal(size=(4, 3)))
    assert np.array_equal(net(x).data, net2(x).data)


def test_missing_parameter_rejected(tmp_path, rng):
    p = [("a", Tensor(rng.normal(size=3)))]
    path = tmp_path / "ckpt.npz"
    save_params(path, p)
    with pytest.raises(CheckpointError, match="missing"):
        restore_params([("other", Tensor(np.zeros(3)))], load_params(path))


def test_shape_mismatch_rejected(tmp_path, rng):
    path = tmp_path / "ckpt.npz"
    save_params(path, [("a", Tensor(np.zeros(3)))])
    with pytest.raises(CheckpointError, match="shape"):
        restore_params([("a", Tensor(np.zeros(4)))], load_params(path))


def test_not_a_checkpoint(tmp_path):
    path = tmp_path / "junk.npz"
    np.savez(path, x=np.zeros(2))
    with pytest.raises(CheckpointError, match="version"):
        load_params(path)
