import json
from collections import Counter
from dataclasses import replace

import pytest
import torch

from conftest import DESK_NET, MICRO_NET
from adaseg.codespace import HyperParams
from adaseg.data import DataRegistry, LabeledSet, UnlabeledSet
from adaseg.errors import CheckpointError, ConfigError, DataError
from adaseg.losses import make_teacher, teacher_hash
from adaseg.training import (
    init_state,
    load_checkpoint,
    run_schedule,
    sample_task,
    save_checkpoint,
    scheduled_lr,
    train_step,
)


def _micro_registry(seed=0, n=4, size=8):
    g = torch.Generator().manual_seed(seed)

    def images(k):
        return [torch.randn(1, size, size, generator=g).clamp(-1, 1) for _ in range(k)]

    def masks(k):
        out = []
        for _ in range(k):
            fg = (torch.rand(1, size, size, generator=g) > 0.5).float()
            out.append(torch.cat([1 - fg, fg]))
        return out

    ids = [f"s{i}" for i in range(n)]
    return DataRegistry(
        intra_train=LabeledSet(ids, images(n), masks(n)),
        inter_train=UnlabeledSet(ids, images(n)),
        intra_val=LabeledSet(ids[:2], images(2), masks(2)),
        inter_val=LabeledSet(ids[:2], images(2), masks(2)),
    )


class TestSampleTask:
    def test_self_phase_never_yields_da(self, micro_hp):
        reg = _micro_registry()
        rng = torch.Generator().manual_seed(0)
        for _ in range(10_000):
            s = sample_task(rng, "self", reg, micro_hp)
            assert s.task == "self"

    def test_joint_frequencies_uniform(self, micro_hp):
        reg = _micro_registry()
        rng = torch.Generator().manual_seed(1)
        counts = Counter(sample_task(rng, "joint", reg, micro_hp).task
                         for _ in range(30_000))
        for task in ("seg", "da_x", "da_y"):
            assert abs(counts[task] / 30_000 - 1 / 3) <= 0.02

    def test_self_variants_uniform(self, micro_hp):
        reg = _micro_registry()
        rng = torch.Generator().manual_seed(2)
        counts = Counter(sample_task(rng, "self", reg, micro_hp).variant
                         for _ in range(10_000))
        assert abs(counts["self_inter"] / 10_000 - 0.5) <= 0.02

    def test_sequence_deterministic_under_seed(self, micro_hp):
        reg = _micro_registry()
        rng1 = torch.Generator().manual_seed(9)
        rng2 = torch.Generator().manual_seed(9)
        first = [sample_task(rng1, "joint", reg, micro_hp) for _ in range(100)]
        second = [sample_task(rng2, "joint", reg, micro_hp) for _ in range(100)]
        assert [s.task for s in first] == [s.task for s in second]
        for a, b in zip(first, second):
            assert torch.equal(a.source, b.source)
            assert all(torch.equal(x, y) for x, y in zip(a.latents, b.latents))

    def test_mix_supervised_flag_reopens_joint_tasks(self):
        reg = _micro_registry()
        hp = HyperParams(mix_supervised=True)
        rng = torch.Generator().manual_seed(4)
        tasks = {sample_task(rng, "self", reg, hp).task for _ in range(200)}
        assert tasks == {"seg", "da_x", "da_y", "self"}

    def test_empty_dataset_rejected(self, micro_hp):
        reg = _micro_registry()
        empty = DataRegistry(reg.intra_train, UnlabeledSet([], []), reg.intra_val,
                             reg.inter_val)
        with pytest.raises(ConfigError):
            sample_task(torch.Generator(), "joint", empty, micro_hp)


def _params_snapshot(state):
    return {name: [p.detach().clone() for p in m.parameters()]
            for name, m in state.models.named_modules()}


def _params_equal(a, b):
    return all(torch.equal(pa, pb) for name in a for pa, pb in zip(a[name], b[name]))


class TestTrainStep:
    def test_zero_lambdas_leave_parameters_unchanged(self, micro_hp):
        reg = _micro_registry()
        hp = HyperParams(lambda_seg=0, lambda_style=0, lambda_cycle=0,
                         lambda_div=0, lambda_inter=0, lambda_intra=0,
                         use_adv=False, seed=6)
        state = init_state(MICRO_NET, hp)
        teacher = make_teacher(state.models, 8, seed=0)
        rng = torch.Generator().manual_seed(5)
        for phase in ("joint", "self"):
            for _ in range(3):
                before = _params_snapshot(state)
                sample = sample_task(rng, phase, reg, hp)
                state, bundle = train_step(state, sample, hp, teacher)
                assert _params_equal(before, _params_snapshot(state))

    def test_iteration_counter_strictly_increases(self, micro_hp):
        reg = _micro_registry()
        state = init_state(MICRO_NET, micro_hp)
        rng = torch.Generator().manual_seed(6)
        for expected in range(1, 6):
            sample = sample_task(rng, "joint", reg, micro_hp)
            state, _ = train_step(state, sample, micro_hp)
            assert state.iteration == expected

    def test_same_state_sample_seed_gives_identical_updates(self, tmp_path, micro_hp):
        reg = _micro_registry()
        state = init_state(MICRO_NET, micro_hp)
        ckpt = tmp_path / "s.pt"
        save_checkpoint(ckpt, state, MICRO_NET)
        sample = sample_task(torch.Generator().manual_seed(7), "joint", reg, micro_hp)

        outs = []
        for _ in range(2):
            st = load_checkpoint(ckpt).state
            st, bundle = train_step(st, sample, micro_hp)
            outs.append((_params_snapshot(st), bundle.to_floats()))
        assert _params_equal(outs[0][0], outs[1][0])
        assert outs[0][1] == outs[1][1]

    def test_nonfinite_sample_aborts_without_mutation(self, micro_hp):
        reg = _micro_registry()
        state = init_state(MICRO_NET, micro_hp)
        rng = torch.Generator().manual_seed(8)
        sample = sample_task(rng, "joint", reg, micro_hp)
        sample.source = sample.source.clone()
        sample.source[0, 0, 0, 0] = float("nan")
        before = _params_snapshot(state)
        state, bundle = train_step(state, sample, micro_hp)
        assert not bundle.finite()
        assert state.iteration == 1
        assert _params_equal(before, _params_snapshot(state))

    def test_seg_overfits_one_pair_on_micro_config(self):
        hp = HyperParams(seed=10, learning_rate=1e-3)
        state = init_state(MICRO_NET, hp)
        g = torch.Generator().manual_seed(11)
        x = torch.randn(1, 1, 8, 8, generator=g).clamp(-1, 1)
        fg = (torch.rand(1, 1, 8, 8, generator=g) > 0.5).float()
        mask = torch.cat([1 - fg, fg], dim=1)
        from adaseg.training import TaskSample
        first = None
        for i in range(300):
            sample = TaskSample("seg", x, masks=mask,
                                latents=(torch.randn(1, 4, generator=g),),
                                route="latent")
            state, bundle = train_step(state, sample, hp)
            value = bundle.to_floats()["seg"]
            if first is None:
                first = value
        assert value < first
        assert value <= 0.05


class TestSchedule:
    def test_lr_two_drops_per_phase(self):
        hp = HyperParams(iters_joint=100, iters_self=50)
        lrs = [scheduled_lr(hp, it) for it in range(150)]
        assert lrs[0] == hp.learning_rate
        assert lrs[59] == hp.learning_rate
        assert lrs[60] == pytest.approx(hp.learning_rate / 10)
        assert lrs[89] == pytest.approx(hp.learning_rate / 10)
        assert lrs[90] == pytest.approx(hp.learning_rate / 100)
        assert lrs[99] == pytest.approx(hp.learning_rate / 100)
        # reset at the self phase, then its own two drops
        assert lrs[100] == hp.learning_rate
        assert lrs[130] == pytest.approx(hp.learning_rate / 10)
        assert lrs[145] == pytest.approx(hp.learning_rate / 100)
        drops_joint = sum(lrs[i + 1] < lrs[i] for i in range(99))
        drops_self = sum(lrs[i + 1] < lrs[i] for i in range(100, 149))
        assert drops_joint == 2 and drops_self == 2

    def test_run_schedule_smoke_and_artifacts(self, tmp_path, tiny_registry):
        hp = HyperParams(seed=21, iters_joint=8, iters_self=4, eval_interval=4,
                         checkpoint_interval=4, prebuild_samples=16)
        result = run_schedule(hp, DESK_NET, tiny_registry, tmp_path)
        assert result.final_path.exists()
        assert result.best_path.exists()
        assert (tmp_path / "loss_trace.jsonl").exists()
        summary = json.loads((tmp_path / "run_summary.json").read_text())
        assert summary["iterations"] == 12
        assert summary["best_val_dice"] >= summary["final_val_dice"] or \
            summary["best_iteration"] < 0
        # phase separation: no da/seg tasks after the transition
        steps = [json.loads(line) for line in
                 (tmp_path / "loss_trace.jsonl").read_text().splitlines()
                 if "task" in json.loads(line)]
        for entry in steps:
            if entry["iteration"] > hp.iters_joint:
                assert entry["task"] == "self"

    def test_phase_transition_exactly_once_and_teacher_frozen(self, tmp_path,
                                                              tiny_registry):
        hp = HyperParams(seed=22, iters_joint=4, iters_self=6, eval_interval=0,
                         checkpoint_interval=0, prebuild_samples=8)
        result = run_schedule(hp, DESK_NET, tiny_registry, tmp_path)
        loaded = load_checkpoint(result.final_path)
        assert loaded.state.phase == "self"
        assert loaded.teacher is not None

    def test_resume_equivalence(self, tmp_path, tiny_registry):
        hp = HyperParams(seed=23, iters_joint=6, iters_self=4, eval_interval=0,
                         checkpoint_interval=0, prebuild_samples=8)
        full = run_schedule(hp, DESK_NET, tiny_registry, tmp_path / "full")

        interrupted = run_schedule(hp, DESK_NET, tiny_registry, tmp_path / "split",
                                   stop_after=5)
        assert interrupted.summary["interrupted"]
        resumed = run_schedule(hp, DESK_NET, tiny_registry, tmp_path / "split",
                               resume=True)
        full_steps = [e for e in full.loss_trace if "task" in e]
        resumed_steps = [e for e in resumed.loss_trace if "task" in e]
        assert [e["iteration"] for e in resumed_steps] == \
            [e["iteration"] for e in full_steps[5:]]
        for a, b in zip(full_steps[5:], resumed_steps):
            assert a == b

    def test_resume_rejects_different_net_config(self, tmp_path, tiny_registry):
        hp = HyperParams(seed=24, iters_joint=2, iters_self=0, eval_interval=0,
                         checkpoint_interval=2, prebuild_samples=4)
        run_schedule(hp, DESK_NET, tiny_registry, tmp_path)
        other = replace(DESK_NET, base_width=8)
        with pytest.raises(ConfigError):
            run_schedule(hp, other, tiny_registry, tmp_path, resume=True)


class TestCheckpointIO:
    def test_round_trip(self, tmp_path, micro_hp):
        state = init_state(MICRO_NET, micro_hp)
        state.iteration = 17
        state.best_score = 0.5
        path = tmp_path / "c.pt"
        save_checkpoint(path, state, MICRO_NET)
        loaded = load_checkpoint(path)
        assert loaded.state.iteration == 17
        assert loaded.state.best_score == 0.5
        assert loaded.net_cfg == MICRO_NET
        assert _params_equal(_params_snapshot(state), _params_snapshot(loaded.state))
        assert torch.equal(loaded.state.rng.get_state(), state.rng.get_state())

    def test_version_mismatch_fails_loudly(self, tmp_path, micro_hp):
        state = init_state(MICRO_NET, micro_hp)
        path = tmp_path / "c.pt"
        save_checkpoint(path, state, MICRO_NET)
        blob = torch.load(path, weights_only=False)
        blob["format_version"] = 99
        torch.save(blob, path)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_corrupted_and_missing_files(self, tmp_path):
        path = tmp_path / "junk.pt"
        path.write_bytes(b"this is not a checkpoint")
        with pytest.raises(DataError):
            load_checkpoint(path)
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "absent.pt")

    def test_teacher_survives_round_trip(self, tmp_path, micro_hp):
        state = init_state(MICRO_NET, micro_hp)
        teacher = make_teacher(state.models, 8, seed=1)
        path = tmp_path / "t.pt"
        save_checkpoint(path, state, MICRO_NET, teacher=teacher)
        loaded = load_checkpoint(path)
        assert teacher_hash(loaded.teacher) == teacher_hash(teacher)
