import math

import numpy as np
import pytest
import torch

from conftest import make_tree
from tap.backends import PromptState, build_embedding_bank
from tap.losses import RegCoefficients
from tap.toy_encoder import ToyDualEncoder, ToyEncoderConfig, build_vocab
from tap.training import (GpaState, ScheduleConfig, TrainingDiverged,
                          build_teacher_assets, compute_batch_loss, epoch_lr,
                          gpa_aggregate, gpa_weights, phase_sequence, train,
                          LR_GROUPS, TASK_EPOCHS, TEXT_PHASE, VISION_PHASE,
                          _set_phase)

TINY = dict(vision_layers=2, vision_width=32, vision_heads=2, text_layers=2,
            text_width=32, text_heads=2, embed_dim=32)


def tiny_setup(num_classes=4, n_per_class=6, seed=0):
    tree = make_tree(num_classes)
    enc = ToyDualEncoder(vocab=build_vocab(tree),
                         config=ToyEncoderConfig(seed=seed, **TINY))
    rng = np.random.default_rng(seed)
    images = torch.tensor(rng.uniform(size=(num_classes * n_per_class, 3, 32, 32)),
                          dtype=torch.float32)
    labels = torch.arange(num_classes).repeat_interleave(n_per_class)
    return tree, enc, images, labels


class TestSchedule:
    def test_six_epochs_is_five_vision_one_text(self):
        cfg = ScheduleConfig(total_epochs=6)
        assert phase_sequence(cfg) == [VISION_PHASE] * 5 + [TEXT_PHASE]

    def test_remainder_lands_on_vision(self):
        cfg = ScheduleConfig(total_epochs=20)
        seq = phase_sequence(cfg)
        assert seq[18] == VISION_PHASE and seq[19] == VISION_PHASE
        assert seq.count(TEXT_PHASE) == 3

    def test_text_first_variant(self):
        cfg = ScheduleConfig(total_epochs=6, vision_first=False)
        assert phase_sequence(cfg)[0] == TEXT_PHASE

    def test_task_presets(self):
        assert ScheduleConfig.for_task("b2n").total_epochs == 60
        assert ScheduleConfig.for_task("xd").total_epochs == 24
        assert ScheduleConfig.for_task("fewshot").total_epochs == 120
        with pytest.raises(ValueError):
            ScheduleConfig.for_task("zeroshot")

    def test_lr_groups(self):
        low = ScheduleConfig(total_epochs=10, lr_group="low-attr")
        assert (low.text_lr, low.vision_lr, low.mu3) == (0.002, 0.006, 3.0)
        high = ScheduleConfig(total_epochs=10, lr_group="high-attr")
        assert (high.text_lr, high.vision_lr, high.mu3) == (0.004, 0.004, 1.5)
        assert set(LR_GROUPS) == {"low-attr", "high-attr"}
        assert TASK_EPOCHS == {"b2n": 60, "xd": 24, "fewshot": 120}

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError):
            ScheduleConfig(total_epochs=0)
        with pytest.raises(ValueError):
            ScheduleConfig(total_epochs=5, vision_phase_len=0)
        with pytest.raises(ValueError):
            ScheduleConfig(total_epochs=5, lr_group="mid")

    def test_lr_warmup_then_cosine_decay(self):
        cfg = ScheduleConfig(total_epochs=10)
        lrs = [epoch_lr(0.004, e, cfg) for e in range(10)]
        assert lrs[0] == pytest.approx(0.0004)
        assert lrs[1] == pytest.approx(0.004)
        assert all(a >= b for a, b in zip(lrs[1:], lrs[2:]))


class TestGpa:
    def test_weights_normalized_and_peaked(self):
        w = gpa_weights(60)
        assert abs(w.sum() - 1.0) < 1e-9
        assert int(np.argmax(w)) + 1 == 54   # epoch indexing is 1-based

    def test_weights_strictly_increase_to_peak(self):
        w = gpa_weights(60)
        peak = math.ceil(0.9 * 60)
        assert all(w[i] < w[i + 1] for i in range(peak - 1))

    def test_identical_snapshots_aggregate_exactly(self):
        snap = {"a": torch.randn(4, 3), "b": torch.randn(2)}
        agg = gpa_aggregate([{k: v.clone() for k, v in snap.items()}
                             for _ in range(7)], total_epochs=7)
        assert torch.equal(agg["a"], snap["a"])
        assert torch.equal(agg["b"], snap["b"])

    def test_two_epoch_hand_computed_weights(self):
        t1, t2 = torch.tensor([1.0], dtype=torch.float64), torch.tensor(
            [3.0], dtype=torch.float64)
        agg = gpa_aggregate([{"p": t1}, {"p": t2}], total_epochs=2)
        mean, std = 1.8, 0.2
        w1 = math.exp(-0.5 * ((1 - mean) / std) ** 2)
        w2 = math.exp(-0.5 * ((2 - mean) / std) ** 2)
        expected = (w1 * 1.0 + w2 * 3.0) / (w1 + w2)
        assert abs(agg["p"].item() - expected) < 1e-9

    def test_wrong_snapshot_count_rejected(self):
        with pytest.raises(ValueError, match="exactly"):
            gpa_aggregate([{"p": torch.zeros(1)}], total_epochs=3)
        state = GpaState(3)
        state.add(1, {"p": torch.zeros(1)})
        with pytest.raises(ValueError, match="snapshots"):
            state.aggregate()

    def test_aggregate_is_convex_combination(self):
        snaps = [{"p": torch.randn(5, dtype=torch.float64)} for _ in range(6)]
        agg = gpa_aggregate(snaps, 6)["p"]
        stack = torch.stack([s["p"] for s in snaps])
        assert bool((agg <= stack.max(0).values + 1e-12).all())
        assert bool((agg >= stack.min(0).values - 1e-12).all())


class TestTeacherAssets:
    def test_zeroshot_features_unit_norm(self):
        tree, enc, _, _ = tiny_setup()
        teacher = build_teacher_assets(enc, tree, tree.class_names)
        assert teacher.zeroshot_features.shape == (4, enc.embed_dim)
        norms = teacher.zeroshot_features.norm(dim=-1)
        assert torch.allclose(norms, torch.ones(4), atol=1e-6)

    def test_teacher_is_frozen(self):
        tree, enc, _, _ = tiny_setup()
        teacher = build_teacher_assets(enc, tree, tree.class_names)
        assert all(not p.requires_grad
                   for p in teacher.frozen_backend.parameters())


class TestBatchLoss:
    def test_disabled_reg_total_is_class_loss(self):
        tree, enc, images, labels = tiny_setup()
        enc.freeze()
        ps = PromptState.create(enc, tree.attribute_names)
        teacher = build_teacher_assets(enc, tree, tree.class_names)
        bank = build_embedding_bank(enc, tree, ps)
        out = compute_batch_loss(enc, tree, ps, bank, teacher, images[:8],
                                 labels[:8], tree.class_names,
                                 RegCoefficients(enabled=False))
        assert out.l_total is out.l_class
        assert set(out.per_attribute_class_losses) == {"Color", "Shape",
                                                       "global context"}

    def test_phase_gradient_discipline(self):
        tree, enc, images, labels = tiny_setup()
        enc.freeze()
        ps = PromptState.create(enc, tree.attribute_names)
        teacher = build_teacher_assets(enc, tree, tree.class_names)

        _set_phase(ps, VISION_PHASE)
        bank = build_embedding_bank(enc, tree, ps)
        out = compute_batch_loss(enc, tree, ps, bank, teacher, images[:8],
                                 labels[:8], tree.class_names, RegCoefficients())
        out.l_total.backward()
        assert ps.ctx_tokens.grad is None
        assert ps.expert_tokens[0].grad is not None
        assert ps.vcp_q[0].grad is not None
        for p in ps.parameters():
            p.grad = None

        _set_phase(ps, TEXT_PHASE)
        bank = build_embedding_bank(enc, tree, ps)
        out = compute_batch_loss(enc, tree, ps, bank, teacher, images[:8],
                                 labels[:8], tree.class_names, RegCoefficients())
        out.l_total.backward()
        assert ps.ctx_tokens.grad is not None
        assert ps.expert_tokens[0].grad is None
        assert ps.vcp_q[0].grad is None

    def test_teacher_receives_no_gradient(self):
        tree, enc, images, labels = tiny_setup()
        enc.freeze()
        ps = PromptState.create(enc, tree.attribute_names)
        teacher = build_teacher_assets(enc, tree, tree.class_names)
        _set_phase(ps, VISION_PHASE)
        bank = build_embedding_bank(enc, tree, ps)
        out = compute_batch_loss(enc, tree, ps, bank, teacher, images[:8],
                                 labels[:8], tree.class_names, RegCoefficients())
        out.l_total.backward()
        assert all(p.grad is None for p in teacher.frozen_backend.parameters())
        assert all(p.grad is None for p in enc.parameters())


class TestTrainLoop:
    def run_tiny(self, epochs=6, seed=0, reg=None, **kwargs):
        tree, enc, images, labels = tiny_setup(seed=seed)
        schedule = ScheduleConfig(total_epochs=epochs, batch_size=12)
        out = train(enc, tree, images, labels, tree.class_names, schedule,
                    reg=reg, seed=seed, **kwargs)
        return tree, enc, out

    def test_history_records_phases_and_components(self):
        _, _, out = self.run_tiny(epochs=6)
        assert out.phases == [VISION_PHASE] * 5 + [TEXT_PHASE]
        steps = {r["step"] for r in out.history}
        assert len(steps) == len(out.history)
        first = out.history[0]
        for key in ("epoch", "phase", "l_class", "l_l1_v", "l_kl_attr",
                    "l_con_t", "l_total", "lr"):
            assert key in first

    def test_backbone_is_bit_identical_after_training(self):
        tree, enc, images, labels = tiny_setup()
        before = {k: v.detach().clone() for k, v in enc.state_dict().items()}
        schedule = ScheduleConfig(total_epochs=3, batch_size=12)
        train(enc, tree, images, labels, tree.class_names, schedule, seed=0)
        after = enc.state_dict()
        for k, v in before.items():
            assert torch.equal(v, after[k]), f"backbone drifted at {k}"

    def test_same_seed_same_result(self):
        _, _, a = self.run_tiny(epochs=4, seed=5)
        _, _, b = self.run_tiny(epochs=4, seed=5)
        for pa, pb in zip(a.prompt_last.parameters(), b.prompt_last.parameters()):
            assert torch.equal(pa, pb)
        assert a.history == b.history

    def test_different_seed_differs(self):
        _, _, a = self.run_tiny(epochs=3, seed=1)
        _, _, b = self.run_tiny(epochs=3, seed=2)
        assert any(not torch.equal(pa, pb) for pa, pb in
                   zip(a.prompt_last.parameters(), b.prompt_last.parameters()))

    def test_gpa_prompts_differ_from_last_but_share_shapes(self):
        _, _, out = self.run_tiny(epochs=6)
        for pa, pb in zip(out.prompt_last.parameters(),
                          out.prompt_gpa.parameters()):
            assert pa.shape == pb.shape

    def test_no_reg_logs_total_equals_class(self):
        _, _, out = self.run_tiny(epochs=3, reg=RegCoefficients(enabled=False))
        for rec in out.history:
            assert rec["l_total"] == rec["l_class"]

    def test_class_loss_decreases_on_separable_data(self):
        _, _, out = self.run_tiny(epochs=6, seed=0)
        first_epoch = [r["l_class"] for r in out.history if r["epoch"] == 1]
        last_epoch = [r["l_class"] for r in out.history if r["epoch"] == 6]
        assert np.mean(last_epoch) < np.mean(first_epoch)

    def test_non_finite_loss_aborts_with_breakdown(self):
        tree, enc, images, labels = tiny_setup()
        schedule = ScheduleConfig(total_epochs=2, batch_size=12)
        # an infinite coefficient instantly poisons the total
        reg = RegCoefficients(mu1=float("inf"))
        with pytest.raises(TrainingDiverged) as err:
            train(enc, tree, images, labels, tree.class_names, schedule,
                  reg=reg, seed=0)
        assert "l_class" in err.value.breakdown
