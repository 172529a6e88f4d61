"""Loss, optimizer, scheduler, batching, the training loop, checkpoints."""

import numpy as np
import pytest

from amnet.affinity import AmConfig
from amnet.errors import CheckpointError, DivergenceError, ShapeMismatchError
from amnet.model import AmnModel, ModelConfig, init_params
from amnet.tensor import Tensor
from amnet.training import (AdamWState, Batch, PlateauState, TrainConfig, adamw_step,
                            bce_loss, collate, load_checkpoint, plateau_update,
                            save_checkpoint, train, write_history_csv)


def rng(seed=0):
    return np.random.default_rng(seed)


def tiny_config(**overrides):
    base = dict(classes=2, conv_channels=(2, 3, 4), gru_hidden=3, n_mels=8,
                freq_down_factors=(2, 2, 2))
    base.update(overrides)
    return ModelConfig(**base)


def toy_examples(n=12, t=16, classes=2, seed=0):
    r = rng(seed)
    out = []
    for i in range(n):
        label = i % classes
        feats = r.normal(size=(t, 8)) * 0.1
        feats[:, label * 3:label * 3 + 2] += 2.0  # class-dependent bands
        y = np.zeros(classes)
        y[label] = 1.0
        out.append((feats, y))
    return out


# ---------------------------------------------------------------------- #
# BCE loss
# ---------------------------------------------------------------------- #


def test_bce_perfect_prediction_near_zero():
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert bce_loss(Tensor(y), y).item() <= 1e-6


def test_bce_half_everywhere_is_log2():
    probs = np.full((3, 4), 0.5)
    labels = rng(1).integers(0, 2, size=(3, 4)).astype(float)
    assert abs(bce_loss(Tensor(probs), labels).item() - np.log(2.0)) < 1e-12


def test_bce_matches_scalar_loop_oracle():
    r = rng(2)
    probs = r.uniform(0.05, 0.95, size=(4, 3))
    labels = r.integers(0, 2, size=(4, 3)).astype(float)
    total = 0.0
    for i in range(4):
        for k in range(3):
            p = min(max(probs[i, k], 1e-7), 1 - 1e-7)
            total += -(labels[i, k] * np.log(p) + (1 - labels[i, k]) * np.log(1 - p))
    expected = total / 12.0
    assert abs(bce_loss(Tensor(probs), labels).item() - expected) < 1e-10


def test_bce_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        bce_loss(Tensor(np.zeros((2, 3))), np.zeros((3, 2)))


def test_bce_order_invariance_of_mean():
    r = rng(3)
    probs = r.uniform(0.1, 0.9, size=(6, 3))
    labels = r.integers(0, 2, size=(6, 3)).astype(float)
    perm = r.permutation(6)
    a = bce_loss(Tensor(probs), labels).item()
    b = bce_loss(Tensor(probs[perm]), labels[perm]).item()
    assert abs(a - b) < 1e-6


# ---------------------------------------------------------------------- #
# AdamW
# ---------------------------------------------------------------------- #


def make_param(value, grad):
    p = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
    p.grad = np.asarray(grad, dtype=np.float64)
    return p


def test_adamw_zero_gradient_no_decay_keeps_parameters():
    params = {"p": make_param([1.0, -2.0], [0.0, 0.0])}
    state = AdamWState.initial(params)
    out = adamw_step(params, state, lr=0.01, weight_decay=0.0)
    assert np.array_equal(out["p"].data, params["p"].data)


def test_adamw_first_step_moves_by_lr():
    params = {"p": make_param([1.0], [1.0])}
    state = AdamWState.initial(params)
    out = adamw_step(params, state, lr=1e-3, weight_decay=0.0)
    assert abs(out["p"].data[0] - (1.0 - 1e-3)) < 1e-9


def test_adamw_pure_decay_is_multiplicative_shrink():
    params = {"p": make_param([2.0], [0.0])}
    state = AdamWState.initial(params)
    out = adamw_step(params, state, lr=0.1, weight_decay=0.5)
    assert abs(out["p"].data[0] - 2.0 * (1.0 - 0.1 * 0.5)) < 1e-12


def test_adamw_matches_hand_iteration_two_steps():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    p, m, v = 0.5, 0.0, 0.0
    grads = [0.3, -0.2]
    expected = p
    for step, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** step)
        v_hat = v / (1 - b2 ** step)
        expected = expected - lr * m_hat / (np.sqrt(v_hat) + eps)

    params = {"p": make_param([0.5], [grads[0]])}
    state = AdamWState.initial(params)
    params = adamw_step(params, state, lr=lr, weight_decay=0.0)
    params["p"].grad = np.array([grads[1]])
    params = adamw_step(params, state, lr=lr, weight_decay=0.0)
    assert abs(params["p"].data[0] - expected) < 1e-12


def test_adamw_functional_update_leaves_old_tensors_alone():
    params = {"p": make_param([1.0], [1.0])}
    state = AdamWState.initial(params)
    out = adamw_step(params, state, lr=0.1, weight_decay=0.0)
    assert params["p"].data[0] == 1.0
    assert out["p"] is not params["p"]


# ---------------------------------------------------------------------- #
# plateau scheduler
# ---------------------------------------------------------------------- #


def test_plateau_improving_losses_keep_lr():
    state = PlateauState(lr=1e-4, patience=3, factor=0.1)
    for loss in (1.0, 0.9, 0.8):
        lr = plateau_update(state, loss)
    assert lr == 1e-4


def test_plateau_stall_reduces_once_after_patience():
    state = PlateauState(lr=1e-4, patience=3, factor=0.1)
    lrs = [plateau_update(state, 1.0) for _ in range(4)]
    assert lrs[:3] == [1e-4, 1e-4, 1e-4]
    assert abs(lrs[3] - 1e-5) < 1e-20


def test_plateau_improvement_resets_counter():
    state = PlateauState(lr=1e-4, patience=3, factor=0.1)
    plateau_update(state, 1.0)
    plateau_update(state, 1.0)   # stall 1
    plateau_update(state, 0.5)   # improvement resets
    plateau_update(state, 0.5)
    lr = plateau_update(state, 0.5)
    assert lr == 1e-4  # only 2 stalls since reset


def test_plateau_threshold_counts_tiny_improvement_as_stall():
    state = PlateauState(lr=1.0, patience=2, factor=0.5, threshold=1e-6)
    plateau_update(state, 1.0)
    plateau_update(state, 1.0 - 1e-9)
    lr = plateau_update(state, 1.0 - 2e-9)
    assert lr == 0.5


# ---------------------------------------------------------------------- #
# collate
# ---------------------------------------------------------------------- #


def test_collate_equal_lengths_no_padding():
    examples = toy_examples(n=3, t=8)
    batch = collate(examples)
    assert batch.features.shape == (3, 8, 8)
    assert batch.valid_lengths == [8, 8, 8]


def test_collate_pads_to_longest():
    r = rng(4)
    examples = [(r.normal(size=(500, 8)), np.array([1.0, 0.0])),
                (r.normal(size=(250, 8)), np.array([0.0, 1.0]))]
    batch = collate(examples)
    assert batch.features.shape == (2, 500, 8)
    assert batch.valid_lengths == [500, 250]
    assert np.abs(batch.features[1, 250:]).max() == 0.0


def test_collate_single_clip_identity():
    examples = toy_examples(n=1, t=12)
    batch = collate(examples)
    assert np.array_equal(batch.features[0], examples[0][0])


def test_collate_empty_rejected():
    with pytest.raises(ValueError):
        collate([])


# ---------------------------------------------------------------------- #
# training loop
# ---------------------------------------------------------------------- #


def test_training_loss_decreases_on_toy_data():
    examples = toy_examples(n=12, t=16)
    cfg = tiny_config()
    tcfg = TrainConfig(lr=1e-3, batch_size=4, max_epochs=6, seed=0)
    result = train(examples, examples[:4], cfg, tcfg)
    losses = [r.train_loss for r in result.history]
    assert losses[-1] < losses[0]
    assert len(result.history) == 6
    assert all(np.isfinite(r.val_loss) for r in result.history)


def test_training_bit_deterministic():
    examples = toy_examples(n=8, t=16)
    cfg = tiny_config()
    tcfg = TrainConfig(lr=1e-3, batch_size=4, max_epochs=3, seed=7)
    a = train(examples, examples[:2], cfg, tcfg)
    b = train(examples, examples[:2], cfg, tcfg)
    assert [r.train_loss for r in a.history] == [r.train_loss for r in b.history]
    assert [r.val_loss for r in a.history] == [r.val_loss for r in b.history]
    for name in a.model.params.tensors:
        assert np.array_equal(a.model.params.tensors[name].data,
                              b.model.params.tensors[name].data)


def test_training_keeps_best_validation_params():
    examples = toy_examples(n=8, t=16)
    cfg = tiny_config()
    tcfg = TrainConfig(lr=1e-3, batch_size=4, max_epochs=4, seed=1)
    result = train(examples, examples[:3], cfg, tcfg)
    best_epoch_loss = min(r.val_loss for r in result.history)
    assert result.best_val_loss == pytest.approx(best_epoch_loss)


def test_training_epoch_hook_stops_early():
    examples = toy_examples(n=8, t=16)
    result = train(examples, [], tiny_config(),
                   TrainConfig(lr=1e-3, batch_size=4, max_epochs=50, seed=0),
                   epoch_hook=lambda epoch, model: epoch >= 2)
    assert len(result.history) == 2


def test_training_divergence_detected():
    examples = toy_examples(n=4, t=16)
    bad = [(np.where(np.isfinite(feats), feats, 0.0) + np.nan, y) for feats, y in examples]
    with pytest.raises(DivergenceError):
        train(bad, [], tiny_config(), TrainConfig(lr=1e-3, batch_size=4, max_epochs=3, seed=0))


def test_batch_order_invariance_of_loss():
    """Permuting clips within a batch leaves the training loss unchanged
    up to summation tolerance."""
    r = rng(21)
    examples = toy_examples(n=6, t=16, seed=3)
    model_cfg = tiny_config(dtype="float64")
    from amnet.model import AmnModel
    model = AmnModel(model_cfg, seed=2)
    batch = collate(examples)
    _, probs_a = model.forward_batch(batch.features, batch.valid_lengths, train=False)
    loss_a = bce_loss(probs_a, batch.labels).item()

    perm = r.permutation(6)
    batch_b = collate([examples[i] for i in perm])
    _, probs_b = model.forward_batch(batch_b.features, batch_b.valid_lengths, train=False)
    loss_b = bce_loss(probs_b, batch_b.labels).item()
    assert abs(loss_a - loss_b) < 1e-6


def test_desk_smoke_loss_strictly_decreases(tmp_path):
    """Paper optimizer settings on 32 real synthetic clips: the first five
    epoch losses strictly decrease."""
    from amnet.audio import featurize, load_wav
    from amnet.data import ScapeSpec, generate
    manifest = generate(ScapeSpec(n_clips=32, clip_seconds=2.0, classes=3,
                                  events_per_clip=(1, 2), event_seconds=(0.4, 1.2),
                                  seed=11), tmp_path / "ds")
    names = manifest.label_union()
    examples = []
    for entry in manifest.entries:
        mel = featurize(load_wav(manifest.audio_path(entry)))
        y = np.array([1.0 if nm in entry.labels else 0.0 for nm in names])
        examples.append((mel.frames.data, y))
    config = ModelConfig.desk_preset(classes=len(names), class_names=names)
    result = train(examples, [], config, TrainConfig.desk_preset(max_epochs=5, seed=0))
    losses = [r.train_loss for r in result.history]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_history_csv_format(tmp_path):
    examples = toy_examples(n=4, t=16)
    result = train(examples, examples[:2], tiny_config(),
                   TrainConfig(lr=1e-3, batch_size=4, max_epochs=2, seed=0))
    path = tmp_path / "history.csv"
    write_history_csv(path, result.history)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,lr"
    assert len(lines) == 3


# ---------------------------------------------------------------------- #
# checkpoints
# ---------------------------------------------------------------------- #


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    cfg = tiny_config(am=AmConfig(placement=("dec@1/4",), tau=0.7))
    model = AmnModel(cfg, seed=3)
    x = rng(5).normal(size=(1, 16, 8))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model.params, cfg)
    params, loaded_cfg = load_checkpoint(path)
    assert loaded_cfg == cfg
    reloaded = AmnModel(loaded_cfg, params)
    _, a = model.forward_batch(x, train=False)
    _, b = reloaded.forward_batch(x, train=False)
    assert np.array_equal(a.data, b.data)


def test_checkpoint_save_load_save_byte_identical(tmp_path):
    cfg = tiny_config()
    model = AmnModel(cfg, seed=4)
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    save_checkpoint(p1, model.params, cfg)
    params, loaded_cfg = load_checkpoint(p1)
    save_checkpoint(p2, params, loaded_cfg)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_bad_version_rejected(tmp_path):
    cfg = tiny_config()
    model = AmnModel(cfg, seed=0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model.params, cfg)
    blob = bytearray(path.read_bytes())
    blob[4] = 99
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_checkpoint_truncation_rejected(tmp_path):
    cfg = tiny_config()
    model = AmnModel(cfg, seed=0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model.params, cfg)
    blob = path.read_bytes()
    path.write_bytes(blob[:len(blob) - 200])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_restores_running_stats(tmp_path):
    cfg = tiny_config()
    model = AmnModel(cfg, seed=6)
    model.forward_batch(rng(7).normal(size=(4, 16, 8)), train=True)  # move stats
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model.params, cfg)
    params, _ = load_checkpoint(path)
    for name, state in model.params.bn_states.items():
        assert np.allclose(params.bn_states[name].mean,
                           state.mean.astype(np.float32), atol=1e-7)
