import copy
import time

import numpy as np
import pytest

from multisiam import checkpoint as CK
from multisiam import scenes as S
from multisiam import train as TR
from multisiam.optim import lars_step, sgd_step
from multisiam.tensor import Tensor

FAST = TR.TrainConfig(steps=6, batch_size=2, corpus_images=8, out_size=32,
                      kmeans_iters=4)


@pytest.fixture(scope="module")
def small_corpus():
    return S.generate(S.SceneSpec(seed=0, size=(32, 32)), 8)


def run_steps(cfg, corpus, n=None, state=None):
    state = state or TR.init_state(cfg)
    metrics = []
    for _ in range(n if n is not None else cfg.steps - state.step):
        metrics.append(TR.train_step(state, corpus))
    return state, metrics


# ---------------------------------------------------------------------------
# config


def test_config_defaults_match_recipe():
    cfg = TR.TrainConfig()
    assert (cfg.iou_threshold, cfg.k, cfg.lambda_weight) == (0.5, 3, 0.5)
    assert (cfg.tau_base, cfg.temperature, cfg.min_scale) == (0.996, 0.2, 0.08)
    assert cfg.weight_decay == 1e-5
    assert (cfg.steps, cfg.batch_size, cfg.accumulation_steps, cfg.optimizer) == (300, 8, 1, "sgd")
    assert (cfg.alignment, cfg.self_attention, cfg.loss_mode) == ("offset", True, "cluster")


def test_config_parsing_and_overrides():
    cfg = TR.config_from_text("")
    assert cfg == TR.TrainConfig()

    cfg = TR.config_from_text("# comment\nlambda=0.7\n\nsteps=12 # trailing\n")
    assert cfg.lambda_weight == 0.7 and cfg.steps == 12

    with pytest.raises(TR.ConfigError, match="alignment"):
        TR.config_from_pairs([("alignment", "banana")])
    with pytest.raises(TR.ConfigError, match="unknown config key"):
        TR.config_from_pairs([("bananas", "3")])
    with pytest.raises(TR.ConfigError, match="steps"):
        TR.config_from_pairs([("steps", "0")])
    with pytest.raises(TR.ConfigError, match="lambda"):
        TR.config_from_pairs([("lambda", "1.5")])
    with pytest.raises(TR.ConfigError, match="steps"):
        TR.config_from_pairs([("steps", "many")])


def test_config_text_roundtrip():
    cfg = TR.TrainConfig(steps=17, lambda_weight=0.25, residual=True, optimizer="lars",
                         loss_mode="moco", seed=9)
    assert TR.config_from_text(TR.config_to_text(cfg)) == cfg
    auto = TR.TrainConfig()
    assert TR.config_from_text(TR.config_to_text(auto)).residual is None


def test_residual_resolution_follows_alignment():
    assert TR.TrainConfig(alignment="roi").resolved_residual is True
    assert TR.TrainConfig(alignment="offset").resolved_residual is False
    assert TR.TrainConfig(alignment="roi", residual=False).resolved_residual is False


# ---------------------------------------------------------------------------
# schedules and optimizers


def test_effective_lr_endpoints_and_scaling():
    cfg = TR.TrainConfig(steps=100, batch_size=256, lr_base=1.0)
    assert TR.effective_lr(0, cfg) == pytest.approx(1.0)
    assert TR.effective_lr(100, cfg) == pytest.approx(0.0, abs=1e-15)
    assert TR.effective_lr(50, cfg) == pytest.approx(0.5)

    half = TR.TrainConfig(steps=100, batch_size=128, lr_base=1.0)
    assert TR.effective_lr(0, half) == pytest.approx(0.5)


def test_sgd_step_basics():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    buffers = {}
    sgd_step({"w": w}, lr=0.1, momentum=0.0, weight_decay=0.0, buffers=buffers)
    assert np.array_equal(w.data, [1.0, 2.0])  # no grad, no update

    w.grad = np.array([1.0, -1.0])
    sgd_step({"w": w}, lr=0.1, momentum=0.0, weight_decay=0.5, buffers=buffers)
    assert np.allclose(w.data, [1.0 - 0.1 * 1.5, 2.0 + 0.1 * 0.0])  # g + wd*w


def test_sgd_momentum_matches_recurrence():
    w = Tensor(np.array([0.5]), requires_grad=True)
    buffers = {}
    grads = [np.array([0.2]), np.array([-0.1])]
    expect_w, buf = 0.5, 0.0
    for g in grads:
        w.grad = g.copy()
        sgd_step({"w": w}, lr=0.3, momentum=0.9, weight_decay=0.0, buffers=buffers)
        buf = 0.9 * buf + float(g[0])
        expect_w -= 0.3 * buf
    assert w.data[0] == pytest.approx(expect_w, abs=1e-15)


def test_lars_step_cases():
    # zero gradient, zero weight decay: no movement
    w = Tensor(np.full((2, 2), 3.0), requires_grad=True)
    w.grad = np.zeros((2, 2))
    lars_step({"w": w}, lr=1.0, momentum=0.0, weight_decay=0.0, trust_coeff=0.001,
              buffers={})
    assert np.allclose(w.data, 3.0)

    # ||w|| == ||g||, trust 1: reduces to sgd
    w = Tensor(np.array([[2.0, 0.0], [0.0, 0.0]]), requires_grad=True)
    w.grad = np.array([[0.0, 2.0], [0.0, 0.0]])
    lars_step({"w": w}, lr=0.1, momentum=0.0, weight_decay=0.0, trust_coeff=1.0,
              buffers={})
    assert np.allclose(w.data, [[2.0, -0.2], [0.0, 0.0]], atol=1e-9)

    # single-element weight matrix: w=2, g=1 -> w - lr * 0.001 * 2 / 1
    w = Tensor(np.array([[2.0]]), requires_grad=True)
    w.grad = np.array([[1.0]])
    lars_step({"w": w}, lr=1.0, momentum=0.0, weight_decay=0.0, trust_coeff=0.001,
              buffers={})
    assert w.data[0, 0] == pytest.approx(1.998, abs=1e-9)

    # bias-like tensors use local rate 1 and skip weight decay
    b = Tensor(np.array([1.0]), requires_grad=True)
    b.grad = np.array([0.5])
    lars_step({"b": b}, lr=0.1, momentum=0.0, weight_decay=10.0, trust_coeff=0.001,
              buffers={})
    assert b.data[0] == pytest.approx(1.0 - 0.05)


# ---------------------------------------------------------------------------
# the training step


def test_train_step_deterministic(small_corpus):
    _, a = run_steps(FAST, small_corpus)
    _, b = run_steps(FAST, small_corpus)
    assert a == b


def test_cluster_mode_loss_bounded(small_corpus):
    _, metrics = run_steps(FAST, small_corpus)
    for row in metrics:
        assert -1.0 - 1e-9 <= row.loss <= 1.0 + 1e-9
        assert -1.0 - 1e-9 <= row.l1d <= 1.0 + 1e-9
        assert -1.0 - 1e-9 <= row.l2d <= 1.0 + 1e-9


@pytest.mark.parametrize("loss_mode", ["cluster", "wo_kmeans", "moco"])
def test_no_target_gradients_in_any_mode(small_corpus, loss_mode):
    cfg = TR.TrainConfig(steps=2, batch_size=2, corpus_images=8, out_size=32,
                         loss_mode=loss_mode, kmeans_iters=3)
    state = TR.init_state(cfg)
    captured = {}
    TR.train_step(state, small_corpus, grad_probe=captured.update)
    assert all(p.grad is None for p in state.pair.target.values())
    assert any(g is not None for g in captured.values())
    if loss_mode == "moco":
        assert len(state.queue) > 0


def test_target_params_follow_ema_recurrence(small_corpus):
    cfg = TR.TrainConfig(steps=5, batch_size=2, corpus_images=8, out_size=32,
                         kmeans_iters=3)
    state = TR.init_state(cfg)
    target0 = {k: v.data.copy() for k, v in state.pair.target.items()}
    online_after: list[dict] = []
    taus = []
    for step in range(cfg.steps):
        row = TR.train_step(state, small_corpus)
        online_after.append({k: v.data.copy() for k, v in state.pair.online.items()})
        taus.append(row.tau)

    expected = target0
    for theta, tau in zip(online_after, taus):
        expected = {k: tau * expected[k] + (1.0 - tau) * theta[k] for k in expected}
    for name, want in expected.items():
        assert np.allclose(state.pair.target[name].data, want, atol=1e-12)


def test_accumulated_grads_equal_sum_of_micro_batches(small_corpus):
    cfg = TR.TrainConfig(steps=2, batch_size=2, accumulation_steps=2, corpus_images=8,
                         out_size=32, kmeans_iters=3)

    micro = []
    for step in range(2):
        solo = TR.init_state(TR.TrainConfig(**{**cfg.__dict__, "accumulation_steps": 3}))
        solo.step = step
        TR.train_step(solo, small_corpus)  # never reaches a boundary
        micro.append({k: (p.grad.copy() if p.grad is not None else None)
                      for k, p in solo.pair.online.items()})

    state = TR.init_state(cfg)
    boundary = {}
    params_before_first = {k: p.data.copy() for k, p in state.pair.online.items()}
    TR.train_step(state, small_corpus)
    for name, p in state.pair.online.items():
        assert np.array_equal(p.data, params_before_first[name])  # no optimizer yet
    TR.train_step(state, small_corpus, grad_probe=boundary.update)

    for name, got in boundary.items():
        want = micro[0][name] + micro[1][name]
        assert np.allclose(got, want, rtol=1e-9, atol=1e-12)


def test_training_step_speed(small_corpus):
    cfg = TR.TrainConfig(steps=2)
    corpus = S.generate(S.SceneSpec(seed=1, size=(64, 64)), 8)
    state = TR.init_state(cfg)
    TR.train_step(state, corpus)  # warm-up
    start = time.perf_counter()
    TR.train_step(state, corpus)
    assert time.perf_counter() - start < 2.0


# ---------------------------------------------------------------------------
# checkpointing


def test_checkpoint_roundtrip_bitwise(tmp_path, small_corpus):
    state, _ = run_steps(FAST, small_corpus, n=3)
    path = tmp_path / "run.ckpt"
    CK.save_checkpoint(state, path)
    loaded = CK.load_checkpoint(path)
    assert loaded.step == 3
    assert loaded.config == state.config
    for name, p in state.pair.online.items():
        assert np.array_equal(loaded.pair.online[name].data, p.data)
        assert loaded.pair.online[name].requires_grad
    for name, p in state.pair.target.items():
        assert np.array_equal(loaded.pair.target[name].data, p.data)
        assert not loaded.pair.target[name].requires_grad
    assert set(loaded.opt_buffers) == set(state.opt_buffers)
    for name, buf in state.opt_buffers.items():
        assert np.array_equal(loaded.opt_buffers[name], buf)


def test_checkpoint_rejects_damage(tmp_path, small_corpus):
    state, _ = run_steps(FAST, small_corpus, n=1)
    path = tmp_path / "run.ckpt"
    CK.save_checkpoint(state, path)
    blob = path.read_bytes()

    bad_magic = tmp_path / "magic.ckpt"
    bad_magic.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CK.CheckpointError, match="magic"):
        CK.load_checkpoint(bad_magic)

    truncated = tmp_path / "trunc.ckpt"
    truncated.write_bytes(blob[:-20])
    with pytest.raises(CK.CheckpointError):
        CK.load_checkpoint(truncated)

    trailing = tmp_path / "trail.ckpt"
    trailing.write_bytes(blob + b"junk")
    with pytest.raises(CK.CheckpointError, match="trailing"):
        CK.load_checkpoint(trailing)


def test_resume_matches_uninterrupted_run(tmp_path, small_corpus):
    cfg = TR.TrainConfig(steps=6, batch_size=2, corpus_images=8, out_size=32,
                         kmeans_iters=3)
    full_state, full_metrics = run_steps(cfg, small_corpus)

    head_state, head_metrics = run_steps(cfg, small_corpus, n=3)
    path = tmp_path / "head.ckpt"
    CK.save_checkpoint(head_state, path)
    resumed = CK.load_checkpoint(path)
    tail_metrics = []
    while resumed.step < cfg.steps:
        tail_metrics.append(TR.train_step(resumed, small_corpus))

    assert head_metrics + tail_metrics == full_metrics
    for name, p in full_state.pair.online.items():
        assert np.array_equal(resumed.pair.online[name].data, p.data)
    for name, p in full_state.pair.target.items():
        assert np.array_equal(resumed.pair.target[name].data, p.data)


def test_moco_checkpoint_preserves_queue(tmp_path, small_corpus):
    cfg = TR.TrainConfig(steps=4, batch_size=2, corpus_images=8, out_size=32,
                         loss_mode="moco", kmeans_iters=3, queue_length=64)
    state, _ = run_steps(cfg, small_corpus, n=2)
    path = tmp_path / "moco.ckpt"
    CK.save_checkpoint(state, path)
    loaded = CK.load_checkpoint(path)
    assert np.array_equal(loaded.queue.buffer, state.queue.buffer)
    assert (loaded.queue.size, loaded.queue.cursor) == (state.queue.size, state.queue.cursor)

    resumed_rows = [TR.train_step(loaded, small_corpus) for _ in range(2)]
    direct_rows = [TR.train_step(state, small_corpus) for _ in range(2)]
    assert resumed_rows == direct_rows


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts(small_corpus):
    state = TR.init_state(FAST)
    # the final 1d layer has no relu after it, so the inf reaches the loss
    state.pair.online["pred1d.fc2.w"].data[:] = np.inf
    with pytest.raises(TR.TrainingError, match="non-finite"):
        TR.train_step(state, small_corpus)
