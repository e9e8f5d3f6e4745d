import math

import numpy as np
import pytest

from graphter.autodiff import Tensor
from graphter.data import make_dataset
from graphter.training import (
    RunConfig,
    SgdState,
    TrainingDiverged,
    build_model,
    cosine_lr,
    load_training_checkpoint,
    make_batch,
    parse_config_text,
    pretrain,
    save_training_checkpoint,
    sgd_step,
    train_step,
)


def one_param(w, g):
    p = Tensor(np.array([w]), requires_grad=True)
    p.grad = np.array([g])
    return {"w": p}


def test_sgd_plain_step():
    params = one_param(1.0, 2.0)
    sgd_step(params, SgdState(0.1, 0.0, 0.0))
    assert params["w"].data[0] == pytest.approx(0.8, abs=1e-15)
    assert params["w"].data[0] == 1.0 - 0.1 * 2.0


def test_sgd_decay_only():
    params = one_param(1.0, 0.0)
    sgd_step(params, SgdState(1.0, 0.0, 0.1))
    assert params["w"].data[0] == 0.9


def test_sgd_momentum_two_steps():
    params = one_param(0.0, 1.0)
    state = SgdState(1.0, 0.9, 0.0)
    sgd_step(params, state)
    assert params["w"].data[0] == -1.0
    params["w"].grad = np.array([1.0])
    sgd_step(params, state)
    assert state.velocity["w"][0] == 1.9
    assert params["w"].data[0] == -2.9


def test_sgd_missing_grad():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError, match="no gradient"):
        sgd_step({"p": p}, SgdState(0.1))


def test_sgd_state_bounds():
    with pytest.raises(ValueError):
        SgdState(0.1, momentum=1.0)
    with pytest.raises(ValueError):
        SgdState(0.1, weight_decay=-1.0)


def test_cosine_endpoints_and_midpoint():
    assert abs(cosine_lr(0, 30, 0.05, 0.0005) - 0.05) <= 1e-12
    assert abs(cosine_lr(30, 30, 0.05, 0.0005) - 0.0005) <= 1e-12
    assert abs(cosine_lr(15, 30, 0.05, 0.0005) - (0.05 + 0.0005) / 2) <= 1e-12
    lrs = [cosine_lr(e, 30, 0.05, 0.0005) for e in range(31)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        cosine_lr(31, 30, 0.05, 0.0005)
    with pytest.raises(ValueError):
        cosine_lr(-1, 30, 0.05, 0.0005)


def test_config_text_round_trip(tmp_path):
    cfg = RunConfig(seed=7, kind="rotation", rate=0.5, dynamic_graph=True, lr_max=0.1 / 3)
    path = tmp_path / "run.cfg"
    cfg.save(path)
    assert RunConfig.load(path) == cfg


def test_config_rejects_unknown_keys_and_bad_values():
    with pytest.raises(ValueError, match="unknown config key"):
        parse_config_text("seed = 1\nlearning_rate = 3\n")
    with pytest.raises(ValueError, match=":2"):
        parse_config_text("seed = 1\nepochs = many\n")
    with pytest.raises(ValueError):
        RunConfig(rate=1.5)
    with pytest.raises(ValueError):
        RunConfig(kind="scaling")
    assert parse_config_text("# comment\n\nrate = 0.5  # trailing\n") == {"rate": 0.5}


def small_config(**kw):
    base = dict(epochs=2, batch_size=4, architecture="tiny", k=4, n_points=32, per_class=4, classes="sphere,cube")
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def small_data():
    return make_dataset(["sphere", "cube"], per_class=4, n_points=32, seed=0)


def test_zero_lr_leaves_weights_unchanged(small_data):
    cfg = small_config(lr_max=0.0, lr_min=0.0)
    model = build_model(cfg)
    before = {n: p.data.copy() for n, p in model.named_parameters().items()}
    pretrain(cfg, small_data, model=model)
    for n, p in model.named_parameters().items():
        assert p.data.tobytes() == before[n].tobytes()


def test_pretrain_deterministic(small_data, tmp_path):
    cfg = small_config()
    a = pretrain(cfg, small_data, metrics_path=tmp_path / "a.csv")
    b = pretrain(cfg, small_data, metrics_path=tmp_path / "b.csv")
    assert [m.mean_loss for m in a.metrics] == [m.mean_loss for m in b.metrics]
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,mean_loss,wall_ms" and len(lines) == 3
    assert all(math.isfinite(m.mean_loss) for m in a.metrics)


def test_non_finite_loss_aborts(small_data):
    cfg = small_config()
    model = build_model(cfg)
    batch = make_batch(small_data.train[:2], cfg, np.random.default_rng(0))
    batch.targets[0, 0] = np.inf
    with pytest.raises(TrainingDiverged, match="non-finite"):
        train_step(model, batch, SgdState(0.1))


def test_checkpoint_resume_is_bitwise(small_data, tmp_path):
    cfg = small_config(epochs=1)
    res = pretrain(cfg, small_data)
    path = tmp_path / "ck.gter"
    save_training_checkpoint(path, res.model, res.optimizer)
    batch = make_batch(small_data.train[:4], cfg, np.random.default_rng(5))

    model2, state2 = load_training_checkpoint(path, cfg)
    state2.lr = res.optimizer.lr
    train_step(res.model, batch, res.optimizer)
    train_step(model2, batch, state2)
    a, b = res.model.state_arrays(), model2.state_arrays()
    assert a.keys() == b.keys()
    for name in a:
        assert a[name].dtype == np.float32
        assert a[name].tobytes() == b[name].tobytes(), name
