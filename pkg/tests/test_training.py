import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lineagediff.checkpoint import FORMAT_VERSION, MAGIC, dumps, load_checkpoint, loads, save_checkpoint
from lineagediff.denoiser import DTYPE, Denoiser
from lineagediff.diffusion import build_schedule, q_sample
from lineagediff.errors import (
    CorruptCheckpoint,
    EmptyBatch,
    NonFiniteLoss,
    ShapeMismatch,
    VersionMismatch,
)
from lineagediff.gradcheck import tiny_config
from lineagediff.training import (
    EpochBatcher,
    TrainConfig,
    TrainingState,
    dropout_labels,
    ema_update,
    fit,
    new_state,
    train_step,
)


def one_hot_batch(cfg, n, seed=0):
    g = torch.Generator().manual_seed(seed)
    idx = torch.randint(0, cfg.D_in, (n, cfg.L), generator=g)
    return torch.nn.functional.one_hot(idx, cfg.D_in).to(DTYPE), torch.arange(n) % cfg.num_classes


def snapshot(state):
    return {n: p.detach().clone() for n, p in state.model.named_parameters()}


# --- label dropout ------------------------------------------------------------

def test_dropout_extremes():
    labels = torch.arange(100) % 5
    g = torch.Generator().manual_seed(0)
    assert torch.equal(dropout_labels(labels, 0.0, 5, g), labels)
    assert torch.all(dropout_labels(labels, 1.0, 5, g) == 5)


def test_dropout_rate():
    n = 100_000
    out = dropout_labels(torch.zeros(n, dtype=torch.long), 0.1, 7, torch.Generator().manual_seed(3))
    rate = (out == 7).double().mean().item()
    assert abs(rate - 0.1) <= 0.005


def test_dropout_consumes_same_randomness_for_any_p():
    a, b = torch.Generator().manual_seed(1), torch.Generator().manual_seed(1)
    dropout_labels(torch.zeros(10, dtype=torch.long), 0.0, 1, a)
    dropout_labels(torch.zeros(10, dtype=torch.long), 0.7, 1, b)
    assert torch.equal(torch.rand(3, generator=a), torch.rand(3, generator=b))


def test_dropout_rejects_bad_p():
    with pytest.raises(ValueError):
        dropout_labels(torch.zeros(2, dtype=torch.long), 1.5, 1, torch.Generator())


# --- EMA ------------------------------------------------------------------------

@given(st.floats(min_value=0.0, max_value=0.999), st.integers(min_value=1, max_value=20))
@settings(max_examples=40, deadline=None)
def test_ema_closed_form_constant_params(decay, k):
    e0 = torch.tensor([1.0, -2.0, 0.5], dtype=DTYPE)
    theta = torch.tensor([3.0, 0.0, -1.0], dtype=DTYPE)
    ema = {"w": e0.clone()}
    for _ in range(k):
        ema_update(ema, {"w": theta}, decay)
    expect = decay ** k * e0 + (1 - decay ** k) * theta
    assert torch.allclose(ema["w"], expect, atol=1e-12, rtol=0)


def test_ema_zero_decay_copies():
    ema = {"w": torch.zeros(4, dtype=DTYPE)}
    theta = torch.arange(4, dtype=DTYPE)
    ema_update(ema, {"w": theta}, 0.0)
    assert torch.equal(ema["w"], theta)


def test_ema_fixed_point():
    theta = torch.tensor([0.1, 0.2], dtype=DTYPE)
    ema = {"w": theta.clone()}
    ema_update(ema, {"w": theta}, 0.9999)
    assert torch.equal(ema["w"], theta)


def test_ema_mismatch():
    with pytest.raises(ShapeMismatch):
        ema_update({"w": torch.zeros(2)}, {"v": torch.zeros(2)}, 0.5)
    with pytest.raises(ShapeMismatch):
        ema_update({"w": torch.zeros(2)}, {"w": torch.zeros(3)}, 0.5)


# --- optimizer steps ------------------------------------------------------------

def test_zero_learning_rate_changes_nothing():
    cfg = tiny_config()
    state = TrainingState.create(Denoiser(cfg, seed=1), seed=1)
    before = snapshot(state)
    ema_before = {n: e.clone() for n, e in state.ema.items()}
    tc = TrainConfig(learning_rate=0.0, batch_size=4, ema_decay=0.5)
    train_step(one_hot_batch(cfg, 4), state, build_schedule(cfg.T), tc)
    for n, p in state.model.named_parameters():
        assert torch.equal(p, before[n]), n
        assert torch.equal(state.ema[n], ema_before[n]), n
    assert state.step == 1


def test_first_adam_step_is_lr_times_sign():
    cfg = tiny_config()
    state = TrainingState.create(Denoiser(cfg, seed=2), seed=2)
    before = snapshot(state)
    lr = 1e-3
    tc = TrainConfig(learning_rate=lr, batch_size=4)
    train_step(one_hot_batch(cfg, 4), state, build_schedule(cfg.T), tc)
    for n, p in state.model.named_parameters():
        delta = (p.detach() - before[n]).abs()
        moved = state.exp_avg[n].abs() > 1e-6
        if moved.any():
            assert torch.allclose(delta[moved], torch.full_like(delta[moved], lr), rtol=1e-2), n


@pytest.mark.parametrize("method", ["A", "E"])
def test_training_is_deterministic(method):
    cfg = tiny_config(method)
    x0, y = one_hot_batch(cfg, 12)
    tc = TrainConfig(learning_rate=1e-3, batch_size=4, seed=5, ema_decay=0.9)
    sched = build_schedule(cfg.T)
    runs = []
    for _ in range(2):
        state = fit(new_state(cfg, tc), x0, y, sched, tc, steps=6)
        runs.append(snapshot(state))
    for n in runs[0]:
        assert torch.equal(runs[0][n], runs[1][n]), n


def test_resume_matches_uninterrupted(tmp_path):
    cfg = tiny_config("B")
    x0, y = one_hot_batch(cfg, 10)
    tc = TrainConfig(learning_rate=1e-3, batch_size=4, seed=2, ema_decay=0.9)
    sched = build_schedule(cfg.T)
    straight = fit(new_state(cfg, tc), x0, y, sched, tc, steps=6)

    half = fit(new_state(cfg, tc), x0, y, sched, tc, steps=3)
    save_checkpoint(half, tmp_path / "ck.bin", sched, tc)
    resumed, sched2, tc2 = load_checkpoint(tmp_path / "ck.bin")
    resumed = fit(resumed, x0, y, sched2, tc2, steps=3)
    assert resumed.step == 6
    for n, p in straight.model.named_parameters():
        assert torch.equal(p, dict(resumed.model.named_parameters())[n]), n
        assert torch.equal(straight.ema[n], resumed.ema[n]), n


def test_single_example_overfit():
    cfg = tiny_config("A")
    x0, y = one_hot_batch(cfg, 1)
    sched = build_schedule(cfg.T)
    # every minibatch holds 16 copies of the one sequence, each with its own (t, eps)
    tc = TrainConfig(learning_rate=3e-3, batch_size=16, label_dropout_p=0.0, ema_decay=0.99)
    state = new_state(cfg, tc)
    fit(state, x0.expand(16, -1, -1), y.expand(16), sched, tc, steps=500)
    model = state.model
    g = torch.Generator().manual_seed(99)
    errs = []
    with torch.no_grad():
        for t in range(1, cfg.T + 1):
            eps = torch.randn((16,) + x0.shape[1:], generator=g, dtype=DTYPE)
            x_t = q_sample(x0.expand_as(eps), t, eps, sched)
            errs.append(((model(x_t, t, y.expand(16)).eps_pred - eps) ** 2).mean().item())
    assert np.mean(errs) < 0.05


def test_empty_batch():
    cfg = tiny_config()
    state = TrainingState.create(Denoiser(cfg))
    with pytest.raises(EmptyBatch):
        train_step((torch.zeros(0, cfg.L, cfg.D_in), torch.zeros(0, dtype=torch.long)), state,
                   build_schedule(cfg.T), TrainConfig())
    with pytest.raises(EmptyBatch):
        EpochBatcher(0, 4, 0)


def test_label_count_must_match_batch():
    cfg = tiny_config()
    state = TrainingState.create(Denoiser(cfg))
    with pytest.raises(ShapeMismatch):
        train_step((torch.zeros(2, cfg.L, cfg.D_in), torch.zeros(3, dtype=torch.long)), state,
                   build_schedule(cfg.T), TrainConfig())


def test_non_finite_loss_names_step_and_component():
    cfg = tiny_config()
    state = TrainingState.create(Denoiser(cfg))
    x0, y = one_hot_batch(cfg, 2)
    x0[0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLoss) as err:
        train_step((x0, y), state, build_schedule(cfg.T), TrainConfig())
    assert err.value.step == 1
    assert err.value.component == "mse"


# --- batching -------------------------------------------------------------------

def test_epoch_batcher_covers_each_epoch():
    b = EpochBatcher(10, 5, seed=0)
    first = np.concatenate([b.indices(0), b.indices(1)])
    assert sorted(first.tolist()) == list(range(10))
    assert not np.array_equal(first, np.concatenate([b.indices(2), b.indices(3)]))


def test_epoch_batcher_wraps_and_is_pure():
    b = EpochBatcher(7, 4, seed=3)
    seq = [b.indices(s).tolist() for s in range(6)]
    again = EpochBatcher(7, 4, seed=3)
    assert [again.indices(s).tolist() for s in reversed(range(6))][::-1] == seq
    flat = sum(seq, [])
    assert sorted(flat[:7]) == list(range(7))


# --- checkpoints ----------------------------------------------------------------

@pytest.fixture
def trained():
    cfg = tiny_config("C")
    x0, y = one_hot_batch(cfg, 4)
    tc = TrainConfig(learning_rate=1e-3, batch_size=2, ema_decay=0.9)
    sched = build_schedule(cfg.T)
    return fit(new_state(cfg, tc), x0, y, sched, tc, steps=2), sched, tc


def test_checkpoint_round_trip_bitwise(trained):
    state, sched, tc = trained
    data = dumps(state, sched, tc)
    back, sched2, tc2 = loads(data)
    assert dumps(back, sched2, tc2) == data
    assert tc2 == tc
    assert np.array_equal(sched2.betas, sched.betas)
    assert back.step == state.step
    assert torch.equal(torch.rand(4, generator=back.generator), torch.rand(4, generator=state.generator))


def test_checkpoint_truncated(trained, tmp_path):
    data = dumps(*trained)
    for cut in (4, len(data) // 2, len(data) - 1):
        with pytest.raises(CorruptCheckpoint):
            loads(data[:cut])


def test_checkpoint_bit_flip(trained):
    data = bytearray(dumps(*trained))
    data[-10] ^= 0xFF
    with pytest.raises(CorruptCheckpoint):
        loads(bytes(data))


def test_checkpoint_bad_magic(trained):
    data = dumps(*trained)
    with pytest.raises(CorruptCheckpoint):
        loads(b"NOTACKPT" + data[8:])


def test_checkpoint_version_mismatch(trained):
    data = bytearray(dumps(*trained))
    data[len(MAGIC):len(MAGIC) + 4] = (FORMAT_VERSION + 1).to_bytes(4, "little")
    with pytest.raises(VersionMismatch) as err:
        loads(bytes(data))
    assert str(FORMAT_VERSION + 1) in str(err.value)
    assert str(FORMAT_VERSION) in str(err.value)
