"""Optimizer, training loop, and inference-loop bookkeeping tests."""

from dataclasses import dataclass

import numpy as np
import pytest

from visuolang.diffcore import Rng, Tensor
from visuolang.learnplan import (InferenceBudget, PlanResult, TrainRunConfig,
                                 _infer, adam_init, adam_step, clip_global_norm,
                                 infer_language, plan_from_goal, train,
                                 unpack_weights)
from visuolang.model import ModelConfig
from visuolang.objective import total_training_loss
from visuolang.propriolang import Vocabulary


@dataclass
class Episode:
    frames: np.ndarray
    joints: np.ndarray
    sentence: np.ndarray


def tiny_config(**kw):
    base = dict(image_size=8, image_channels=1, conv_channels=(2, 2, 2),
                lstm_sizes=(4, 4, 4), d_dim=6, z_dim=2, joints=2,
                head_hidden=8)
    base.update(kw)
    return ModelConfig(**base)


def tiny_episode(rng, cfg, t_len=3, words=("grasp", "red", ".")):
    vocab = Vocabulary.load()
    return Episode(
        frames=rng.uniform(0, 1, (t_len + 1, cfg.image_channels,
                                  cfg.image_size, cfg.image_size)),
        joints=rng.uniform(0.2, 0.8, (t_len + 1, cfg.joints)),
        sentence=vocab.encode_sentence(list(words)))


# -- config validation -----------------------------------------------------------

def test_run_config_validation():
    with pytest.raises(ValueError):
        TrainRunConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainRunConfig(clip=-1.0)
    with pytest.raises(ValueError):
        InferenceBudget(iterations=0)
    assert TrainRunConfig().epochs == 5000
    assert InferenceBudget().iterations == 50
    assert InferenceBudget().samples_per_iteration == 5


# -- adam ------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = {"x": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    adam_step(p, {"x": np.zeros(2)}, adam_init(p), lr=0.1)
    np.testing.assert_array_equal(p["x"].data, [1.0, -2.0])


def test_adam_moments_decay():
    p = {"x": Tensor(np.zeros(1), requires_grad=True)}
    mom = adam_init(p)
    mom["m"]["x"][:] = 0.5
    mom["v"]["x"][:] = 0.1
    adam_step(p, {"x": np.zeros(1)}, mom, lr=0.1)
    assert mom["m"]["x"][0] == pytest.approx(0.45)   # beta1 decay
    assert mom["v"]["x"][0] == pytest.approx(0.0999)  # beta2 decay


def test_adam_first_step_magnitude():
    p = {"x": Tensor(np.array([0.0]), requires_grad=True)}
    mom = adam_init(p)
    adam_step(p, {"x": np.array([3.7])}, mom, lr=0.01)
    # bias correction makes the first update ~ lr * sign(g)
    assert p["x"].data[0] == pytest.approx(-0.01, rel=1e-6)


def test_adam_converges_on_quadratic_bowl():
    target = np.array([0.3, -1.2, 0.7])
    p = {"x": Tensor(np.zeros(3), requires_grad=True)}
    mom = adam_init(p)
    for _ in range(2000):
        grad = 2.0 * (p["x"].data - target)
        adam_step(p, {"x": grad}, mom, lr=0.05)
    np.testing.assert_allclose(p["x"].data, target, atol=1e-6)


def test_adam_rejects_shape_mismatch():
    p = {"x": Tensor(np.zeros(3), requires_grad=True)}
    with pytest.raises(ValueError, match="shape"):
        adam_step(p, {"x": np.zeros(2)}, adam_init(p), lr=0.1)


# -- clipping --------------------------------------------------------------------

def test_clip_rescales_to_threshold():
    g = {"a": np.array([0.6]), "b": np.array([0.8])}  # norm 1.0
    norm = clip_global_norm(g, 0.2)
    assert norm == pytest.approx(1.0)
    total = np.sqrt(g["a"][0] ** 2 + g["b"][0] ** 2)
    assert total == pytest.approx(0.2)


def test_clip_leaves_small_gradients_alone():
    g = {"a": np.array([0.1])}
    clip_global_norm(g, 0.2)
    assert g["a"][0] == pytest.approx(0.1)


# -- training ---------------------------------------------------------------------

def test_train_loss_decreases_and_is_deterministic():
    cfg = tiny_config()
    ep = tiny_episode(Rng(0), cfg)
    run = TrainRunConfig(epochs=10, lr=5e-3)
    _, trace1 = train([ep], cfg, run, seed=3)
    _, trace2 = train([ep], cfg, run, seed=3)
    assert [r["total"] for r in trace1] == [r["total"] for r in trace2]
    assert trace1[-1]["total"] < trace1[0]["total"]


def test_train_checkpoint_resume_bit_exact(tmp_path):
    cfg = tiny_config()
    eps = [tiny_episode(Rng(0), cfg), tiny_episode(Rng(1), cfg, t_len=4,
                                                   words=("move", "blue", "left", "."))]
    full_ck, full_trace = train(eps, cfg, TrainRunConfig(epochs=6, lr=5e-3),
                                seed=5)
    half_ck, _ = train(eps, cfg, TrainRunConfig(epochs=3, lr=5e-3), seed=5)

    from visuolang.model import load_checkpoint, save_checkpoint
    path = tmp_path / "half.ckpt"
    save_checkpoint(path, half_ck)
    resumed = load_checkpoint(path)
    cont_ck, cont_trace = train(eps, cfg, TrainRunConfig(epochs=6, lr=5e-3),
                                seed=5, resume=resumed)
    assert cont_trace[-1]["total"] == full_trace[-1]["total"]
    for k in full_ck.tensors:
        np.testing.assert_array_equal(cont_ck.tensors[k], full_ck.tensors[k])


def test_train_aborts_on_nonfinite_input():
    cfg = tiny_config()
    ep = tiny_episode(Rng(0), cfg)
    ep.frames[1, 0, 0, 0] = np.nan
    with pytest.raises(RuntimeError, match="epoch 1, sequence 0"):
        train([ep], cfg, TrainRunConfig(epochs=1), seed=0)


def test_train_trace_file(tmp_path):
    cfg = tiny_config()
    ep = tiny_episode(Rng(0), cfg)
    path = tmp_path / "trace.tsv"
    train([ep], cfg, TrainRunConfig(epochs=2, lr=1e-3), seed=0,
          trace_path=path)
    lines = path.read_text().splitlines()
    assert lines[0].split("\t") == ["epoch", "l_v", "l_m", "l_s", "l_pb",
                                    "kl", "total"]
    assert len(lines) == 3


# -- inference bookkeeping -----------------------------------------------------------

@dataclass
class FakePred:
    frame: Tensor
    joints: Tensor
    pb_tilde: Tensor


def stub_loss_factory(losses):
    """Yields predetermined loss values; counts evaluations."""
    calls = {"n": 0}

    def loss_fn(a, pb_raw, rng):
        val = losses[calls["n"] % len(losses)]
        calls["n"] += 1
        total = (pb_raw * 0.0).sum() + val  # graph-connected constant
        lb = total_training_loss(total, Tensor(np.array(0.0)),
                                 Tensor(np.array(0.0)), Tensor(np.array(0.0)),
                                 Tensor(np.array(0.0)), w=0.0)
        pred = FakePred(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros(2)),
                        Tensor(np.zeros(3)))
        return lb, [pred], Tensor(np.zeros((5, 4)))

    return loss_fn, calls


def test_infer_budget_is_exact():
    loss_fn, calls = stub_loss_factory([1.0])
    weights = {"w": Tensor(np.ones(2))}
    cfg = tiny_config()
    _infer(weights, cfg, t_len=1, budget=InferenceBudget(1, 1), rng=Rng(0),
           loss_fn=loss_fn, lr=1e-3)
    assert calls["n"] == 1
    loss_fn, calls = stub_loss_factory([1.0])
    _infer(weights, cfg, t_len=1, budget=InferenceBudget(4, 3), rng=Rng(0),
           loss_fn=loss_fn, lr=1e-3)
    assert calls["n"] == 12


def test_infer_best_is_global_minimum():
    losses = [5.0, 3.0, 9.0, 4.0, 2.5, 8.0]  # min 2.5 in the middle
    loss_fn, _ = stub_loss_factory(losses)
    result = _infer({"w": Tensor(np.ones(1))}, tiny_config(), t_len=1,
                    budget=InferenceBudget(3, 2), rng=Rng(0),
                    loss_fn=loss_fn, lr=1e-3)
    assert result.best_loss == 2.5
    assert len(result.trace) == 3
    assert result.trace[0] == pytest.approx(4.0)  # mean of (5, 3)


def test_plan_from_goal_freezes_weights_and_runs():
    cfg = tiny_config()
    ep = tiny_episode(Rng(0), cfg)
    ck, _ = train([ep], cfg, TrainRunConfig(epochs=2, lr=1e-3), seed=0)
    weights = unpack_weights(ck)
    before = {k: v.data.copy() for k, v in weights.items()}
    vocab = Vocabulary.load()
    goal = vocab.encode_sentence(["grasp", "red", "."])
    result = plan_from_goal(weights, cfg, goal, ep.frames[0], ep.joints[0],
                            t_len=3, budget=InferenceBudget(2, 2), rng=Rng(7))
    assert isinstance(result, PlanResult)
    assert result.frames.shape == (3, 1, 8, 8)
    assert result.joints.shape == (3, 2)
    for k in before:
        np.testing.assert_array_equal(weights[k].data, before[k])
    # running best is the minimum of the trace-by-construction
    assert result.best_loss <= min(result.trace) + 1e-12


def test_infer_language_runs_and_freezes_weights():
    cfg = tiny_config()
    ep = tiny_episode(Rng(0), cfg)
    ck, _ = train([ep], cfg, TrainRunConfig(epochs=2, lr=1e-3), seed=0)
    weights = unpack_weights(ck)
    before = {k: v.data.copy() for k, v in weights.items()}
    result = infer_language(weights, cfg, ep.frames, ep.joints,
                            budget=InferenceBudget(2, 2), rng=Rng(8))
    assert result.sentence.shape == (5, cfg.vocab_size)
    np.testing.assert_allclose(result.sentence.sum(axis=-1), 1.0, atol=1e-9)
    for k in before:
        np.testing.assert_array_equal(weights[k].data, before[k])
