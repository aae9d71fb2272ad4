import math

import numpy as np
import pytest
import torch

from dfdlab.data import EpochSpec
from dfdlab.models import FreqBranchConfig, ModelConfig, build_model
from dfdlab.preprocess import PreprocessConfig
from dfdlab.seeding import derive_seed
from dfdlab.training import (
    AmpConfig,
    DynamicLossScaler,
    OptimizerConfig,
    PlateauScheduler,
    SchedulerConfig,
    Trainer,
    TrainingConfig,
    TrainingDivergedError,
    bce_with_logits,
    make_optimizer,
)

LN2 = math.log(2.0)


# ---------------------------------------------------------------------------
# loss


def test_bce_closed_form_values():
    # float32 inputs: ln 2 to single precision
    assert abs(float(bce_with_logits(torch.tensor([0.0]), torch.tensor([1.0]))) - LN2) < 1e-6
    assert abs(float(bce_with_logits(torch.tensor([0.0]), torch.tensor([0.0]))) - LN2) < 1e-6
    # float64: the closed form to full precision
    z = torch.tensor([0.0], dtype=torch.float64)
    one = torch.tensor([1.0], dtype=torch.float64)
    assert abs(float(bce_with_logits(z, one)) - LN2) < 1e-15
    assert float(bce_with_logits(torch.tensor([40.0]), torch.tensor([1.0]))) < 1e-15
    assert float(bce_with_logits(torch.tensor([-40.0]), torch.tensor([0.0]))) < 1e-15


def test_bce_finite_at_extreme_logits():
    for z in (100.0, -100.0):
        for y in (0.0, 1.0):
            v = float(bce_with_logits(torch.tensor([z]), torch.tensor([y])))
            assert math.isfinite(v)
            assert v >= 0.0


def test_bce_accepts_column_and_flat_shapes():
    z = torch.tensor([[0.3], [-1.2], [2.0]])
    y = torch.tensor([1.0, 0.0, 1.0])
    a = float(bce_with_logits(z, y))
    b = float(bce_with_logits(z.reshape(-1), y))
    assert a == b


def test_bce_matches_reference_implementation():
    g = torch.Generator().manual_seed(0)
    z = torch.randn(64, generator=g) * 5
    y = (torch.rand(64, generator=g) > 0.5).float()
    ours = float(bce_with_logits(z, y))
    ref = float(torch.nn.functional.binary_cross_entropy_with_logits(z, y))
    assert abs(ours - ref) < 1e-6


def test_bce_validation():
    with pytest.raises(ValueError, match="non-finite"):
        bce_with_logits(torch.tensor([float("nan")]), torch.tensor([1.0]))
    with pytest.raises(ValueError, match="empty"):
        bce_with_logits(torch.zeros(0), torch.zeros(0))
    with pytest.raises(ValueError, match="shape mismatch"):
        bce_with_logits(torch.zeros(3), torch.zeros(2))
    with pytest.raises(ValueError, match="0 or 1"):
        bce_with_logits(torch.zeros(2), torch.tensor([0.5, 1.0]))
    with pytest.raises(ValueError, match="shaped"):
        bce_with_logits(torch.zeros(2, 3), torch.zeros(6))


def test_bce_gradient_matches_central_differences():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(1, 48))
        z0 = rng.normal(0, 2.5, n)
        y = rng.integers(0, 2, n).astype(np.float64)
        z = torch.tensor(z0, dtype=torch.float64, requires_grad=True)
        loss = bce_with_logits(z, torch.tensor(y, dtype=torch.float64))
        loss.backward()
        analytic = z.grad.numpy()
        h = 1e-6
        for i in range(n):
            zp, zm = z0.copy(), z0.copy()
            zp[i] += h
            zm[i] -= h
            fp = float(bce_with_logits(torch.tensor(zp), torch.tensor(y)))
            fm = float(bce_with_logits(torch.tensor(zm), torch.tensor(y)))
            numeric = (fp - fm) / (2 * h)
            denom = max(abs(numeric), abs(analytic[i]), 1e-8)
            assert abs(analytic[i] - numeric) / denom < 1e-4


# ---------------------------------------------------------------------------
# optimizer


def test_optimizer_first_step_magnitude():
    w = torch.nn.Parameter(torch.tensor([1.0]))
    opt = make_optimizer([w], OptimizerConfig(initial_lr=0.1, weight_decay=0.0))
    w.grad = torch.tensor([1.0])
    opt.step()
    # bias-corrected first adaptive step is ~lr * sign(grad)
    assert abs(w.item() - 0.9) < 1e-3


def test_optimizer_zero_grad_zero_decay_fixed_point():
    w = torch.nn.Parameter(torch.tensor([2.5]))
    opt = make_optimizer([w], OptimizerConfig(initial_lr=0.1, weight_decay=0.0))
    w.grad = torch.tensor([0.0])
    opt.step()
    assert w.item() == 2.5


def test_optimizer_decay_shrinks_with_zero_grad():
    for decoupled in (False, True):
        w = torch.nn.Parameter(torch.tensor([2.5]))
        opt = make_optimizer(
            [w],
            OptimizerConfig(
                initial_lr=0.01, weight_decay=0.1, decoupled_weight_decay=decoupled
            ),
        )
        w.grad = torch.tensor([0.0])
        opt.step()
        assert 0.0 < w.item() < 2.5


def test_optimizer_kind_by_flag():
    w = torch.nn.Parameter(torch.tensor([1.0]))
    assert isinstance(
        make_optimizer([w], OptimizerConfig()), torch.optim.Adam
    )
    opt = make_optimizer([w], OptimizerConfig(decoupled_weight_decay=True))
    assert isinstance(opt, torch.optim.AdamW)


def test_optimizer_config_defaults_and_validation():
    cfg = OptimizerConfig()
    assert cfg.initial_lr == 5e-4
    assert cfg.weight_decay == 1e-5
    assert (cfg.beta1, cfg.beta2, cfg.epsilon) == (0.9, 0.999, 1e-8)
    with pytest.raises(ValueError, match="initial_lr"):
        OptimizerConfig(initial_lr=0.0)
    with pytest.raises(ValueError, match="beta1"):
        OptimizerConfig(beta1=1.0)


# ---------------------------------------------------------------------------
# scheduler


def test_scheduler_plateau_reduction_rule():
    s = PlateauScheduler(5e-4, SchedulerConfig(factor=0.1, patience=3))
    assert s.step(1.0) is False  # first value always improves on +inf
    for i in range(3):
        assert s.step(1.0) is False  # within patience
    assert s.step(1.0) is True  # 4th non-improving epoch: counter > patience
    assert abs(s.current_lr - 5e-5) < 1e-18
    assert s.epochs_since_improvement == 0


def test_scheduler_never_reduces_while_improving():
    s = PlateauScheduler(5e-4, SchedulerConfig())
    for k in range(10):
        assert s.step(1.0 - 0.01 * k) is False
    assert s.current_lr == 5e-4


def test_scheduler_threshold_is_absolute():
    s = PlateauScheduler(1e-3, SchedulerConfig(threshold=1e-4, patience=0))
    s.step(0.5)
    # within the threshold: not an improvement, and patience 0 reduces now
    assert s.step(0.5 - 5e-5) is True
    assert abs(s.current_lr - 1e-4) < 1e-18


def test_scheduler_min_lr_floor():
    s = PlateauScheduler(5e-4, SchedulerConfig(factor=0.1, patience=0, min_lr=1e-4))
    s.step(1.0)
    s.step(1.0)
    assert s.current_lr == 1e-4  # 5e-5 floored up
    s.step(1.0)
    assert s.current_lr == 1e-4  # stays at the floor


def test_scheduler_lr_non_increasing_under_any_sequence():
    rng = np.random.default_rng(5)
    s = PlateauScheduler(1e-2, SchedulerConfig(patience=1))
    last = s.current_lr
    for _ in range(200):
        s.step(float(rng.random()))
        assert s.current_lr <= last
        last = s.current_lr


def test_scheduler_state_round_trip():
    s = PlateauScheduler(5e-4, SchedulerConfig())
    s.step(1.0)
    s.step(1.0)
    state = s.state_dict()
    t = PlateauScheduler(5e-4, SchedulerConfig())
    t.load_state_dict(state)
    assert t.current_lr == s.current_lr
    assert t.best_val_loss == s.best_val_loss
    assert t.epochs_since_improvement == s.epochs_since_improvement


def test_scheduler_rejects_non_finite_val_loss():
    s = PlateauScheduler(5e-4, SchedulerConfig())
    with pytest.raises(ValueError, match="finite"):
        s.step(float("nan"))


# ---------------------------------------------------------------------------
# loss scaler


def test_scaler_disabled_is_identity():
    s = DynamicLossScaler(AmpConfig(enabled=False))
    loss = torch.tensor(2.0)
    assert float(s.scale(loss)) == 2.0
    assert s.unscale_and_check([]) is False
    s.update(True)
    assert s.loss_scale == 1.0


def test_scaler_scales_and_unscales():
    s = DynamicLossScaler(AmpConfig(enabled=True))
    assert s.loss_scale == 65536.0
    assert float(s.scale(torch.tensor(1.0))) == 65536.0
    p = torch.nn.Parameter(torch.tensor([1.0]))
    p.grad = torch.tensor([65536.0 * 3])
    assert s.unscale_and_check([p]) is False
    assert p.grad.item() == 3.0


def test_scaler_overflow_backs_off_and_growth_recovers():
    cfg = AmpConfig(enabled=True, init_scale=1024.0, growth_interval=3)
    s = DynamicLossScaler(cfg)
    s.update(True)
    assert s.loss_scale == 512.0
    assert s.steps_since_overflow == 0
    for _ in range(2):
        s.update(False)
        assert s.loss_scale == 512.0
    s.update(False)  # third clean step doubles
    assert s.loss_scale == 1024.0
    assert s.steps_since_overflow == 0


def test_scaler_detects_non_finite_gradients():
    s = DynamicLossScaler(AmpConfig(enabled=True))
    p = torch.nn.Parameter(torch.tensor([1.0]))
    p.grad = torch.tensor([float("inf")])
    assert s.unscale_and_check([p]) is True


def test_scaler_state_round_trip():
    s = DynamicLossScaler(AmpConfig(enabled=True))
    s.update(True)
    s.update(False)
    t = DynamicLossScaler(AmpConfig(enabled=True))
    t.load_state_dict(s.state_dict())
    assert t.loss_scale == s.loss_scale
    assert t.steps_since_overflow == s.steps_since_overflow


# ---------------------------------------------------------------------------
# trainer integration (tiny, fast)

TINY = ModelConfig(backbone_id="tiny_test", pretrained=False, head_seed=3)
TINY_HYBRID = ModelConfig(
    backbone_id="tiny_test", pretrained=False, freq_branch=FreqBranchConfig(feature_dim=16), head_seed=3
)
PRE32 = PreprocessConfig(target_size=32)


def make_trainer(index, seed=0, hybrid=False, amp=None, grad_hook=None, lr=5e-4):
    cfg = TINY_HYBRID if hybrid else TINY
    torch.manual_seed(derive_seed(seed, "model-init"))
    model = build_model(cfg)
    return Trainer(
        model=model,
        model_config=cfg,
        index=index,
        epoch_spec=EpochSpec(images_per_epoch=32, batch_size=8, seed=seed),
        preprocess_config=PRE32,
        optimizer_config=OptimizerConfig(initial_lr=lr),
        amp_config=amp,
        training_config=TrainingConfig(epochs=2, seed=seed),
        grad_hook=grad_hook,
    )


def test_train_epoch_produces_history_row(toy_index):
    tr = make_trainer(toy_index)
    row = tr.train_epoch()
    assert row["epoch"] == 0
    assert math.isfinite(row["train_loss"])
    assert math.isfinite(row["val_loss"])
    assert row["lr"] == 5e-4
    assert row["val_metrics"] is not None and "auc" in row["val_metrics"]
    assert tr.epoch == 1
    assert tr.history == [row]


def test_training_is_deterministic(toy_index):
    a = make_trainer(toy_index, seed=9)
    b = make_trainer(toy_index, seed=9)
    for _ in range(2):
        a.train_epoch()
        b.train_epoch()
    assert a.history == b.history
    for pa, pb in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(pa, pb)


def test_training_seed_changes_trajectory(toy_index):
    a = make_trainer(toy_index, seed=9)
    b = make_trainer(toy_index, seed=10)
    a.train_epoch()
    b.train_epoch()
    assert a.history != b.history


def test_hybrid_training_runs(toy_index):
    tr = make_trainer(toy_index, hybrid=True)
    row = tr.train_epoch()
    assert math.isfinite(row["train_loss"])


def test_validation_carved_from_train_when_absent(toy_corpus):
    from dfdlab.data import build_index, fixed_split

    index, _ = build_index([toy_corpus], fixed_split("train"))
    tr = make_trainer(index)
    carved = tr.index.split_records("val")
    assert carved
    assert {r.label for r in carved} == {0, 1}  # stratified
    train_ids = {r.id for r in tr.index.split_records("train")}
    assert not train_ids & {r.id for r in carved}  # no leakage
    # same seed carves the same validation set
    tr2 = make_trainer(index)
    assert [r.id for r in tr2.val_records] == [r.id for r in tr.val_records]


def test_existing_val_split_used_as_is(toy_index):
    tr = make_trainer(toy_index)
    assert {r.id for r in tr.val_records} == {
        r.id for r in toy_index.split_records("val")
    }


def test_non_finite_forward_aborts_without_amp(toy_index):
    def poison(model, epoch, batch_index):
        if batch_index == 0:
            with torch.no_grad():
                model.head.weight.fill_(float("inf"))

    tr = make_trainer(toy_index, grad_hook=poison)
    with pytest.raises(TrainingDivergedError, match="epoch 0, batch 1"):
        tr.train_epoch()


def test_amp_overflow_mid_epoch_backs_off_and_training_continues(toy_index):
    injected = []

    def inject(model, epoch, batch_index):
        if batch_index == 1:
            for p in model.parameters():
                if p.grad is not None:
                    p.grad.fill_(float("inf"))
                    injected.append(batch_index)
                    break

    tr = make_trainer(toy_index, amp=AmpConfig(enabled=True), grad_hook=inject)
    before_scale = tr.scaler.loss_scale
    row = tr.train_epoch()
    assert injected == [1]
    assert row["skipped_steps"] == 1
    assert tr.scaler.loss_scale == before_scale * 0.5
    assert math.isfinite(row["train_loss"])  # the other batches still trained


def test_amp_step_skip_leaves_params_untouched(toy_index):
    # single-batch epoch: the only step overflows, so nothing may move
    def inject(model, epoch, batch_index):
        for p in model.parameters():
            if p.grad is not None:
                p.grad.fill_(float("inf"))
                break

    torch.manual_seed(derive_seed(0, "model-init"))
    model = build_model(TINY)
    tr = Trainer(
        model=model,
        model_config=TINY,
        index=toy_index,
        epoch_spec=EpochSpec(images_per_epoch=8, batch_size=8, seed=0),
        preprocess_config=PRE32,
        amp_config=AmpConfig(enabled=True),
        training_config=TrainingConfig(epochs=1, seed=0),
        grad_hook=inject,
    )
    before = [p.detach().clone() for p in tr.model.parameters()]
    row = tr.train_epoch()
    assert row["skipped_steps"] == 1
    for p, b in zip(tr.model.parameters(), before):
        assert torch.equal(p, b)
    assert tr.scaler.loss_scale == 65536.0 * 0.5


def test_fit_runs_to_epoch_budget(toy_index):
    tr = make_trainer(toy_index)
    rows = tr.fit(epochs=2)
    assert len(rows) == 2
    assert tr.epoch == 2
    assert [r["epoch"] for r in tr.history] == [0, 1]
