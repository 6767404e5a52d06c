"""Acceptance suite: one test per criterion, each reporting a pass/fail line.

Desk-scale settings: Quad episodes capped at 200 steps, 150-iteration
healthy expert, default 50/50/50/100 curriculum (250 iterations).
"""
import filecmp
import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from dappo import cli, control, ppo
from dappo import damage as dmg
from dappo import diagnosis as dg
from dappo.nn import MLP, LSTMCell, finite_diff_check, gaussian_kl
from dappo.sim import Bodies, RewardConfig, RobotSpec, apply_damage

SPEC = RobotSpec.quad(max_steps=200)
EXPERT_ITERS = 150
SEEDS = (0, 1, 2)
EVAL_SEEDS = [100_000 + i for i in range(10)]


def _timed(fn):
    t = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t


@pytest.fixture(scope="module")
def expert():
    res = ppo.train(ppo.PpoConfig(), SPEC, (("I", EXPERT_ITERS),), seed=0, aware=False)
    return res.policy


@pytest.fixture(scope="module")
def trained():
    """DA-PPO and PPO-Unaware per seed, identical curriculum and budget, plus training time."""
    out, elapsed = {}, 0.0
    for seed in SEEDS:
        for aware in (True, False):
            res, dt = _timed(lambda: ppo.train(ppo.PpoConfig(), SPEC, ppo.DEFAULT_STAGES, seed, aware))
            out[seed, aware] = res.policy
            elapsed += dt
    return out, elapsed


def brute_count(n, k):
    """Assignments of at most two damaged limbs, each limb one of k damage types."""
    total = 0
    for types in itertools.product(range(k + 1), repeat=n):
        if sum(t > 0 for t in types) <= 2:
            total += 1
    return total


def test_criterion_01_class_counts(record):
    def run():
        ok = dmg.count_classes(4, 2) == 33 and dmg.count_classes(6, 2) == 73
        return ok and all(dmg.count_classes(n, k) == brute_count(n, k) for n in range(1, 9) for k in range(1, 4))

    ok, dt = _timed(run)
    record(1, ok and dt < 1.0, f"33/73 and brute force n<=8 k<=3 agree={ok}, {dt:.2f}s")


def test_criterion_02_encoding_bijective(record):
    def run():
        for n in (4, 6):
            for c in dmg.all_classes(n, 2):
                e = dmg.encode(c, n)
                if np.any(e.reshape(n, 2).sum(axis=1) > 1):
                    return False
                if dmg.decode(e, n) != c:
                    return False
        return True

    ok, dt = _timed(run)
    record(2, ok and dt < 1.0, f"106 classes round trip, no [1,1] tuple={ok}, {dt:.2f}s")


def gae_oracle(r, v, d, boot, gamma, lam):
    T = len(r)
    nxt = np.append(v[1:], boot)
    delta = r + gamma * nxt * (1 - d) - v
    adv = np.zeros(T)
    for t in range(T):
        w = 1.0
        for l in range(t, T):
            adv[t] += w * delta[l]
            if d[l]:
                break
            w *= gamma * lam
    return adv


def test_criterion_03_gae_oracle(record):
    def run():
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(1000):
            T = int(rng.integers(1, 21))
            r, v = rng.normal(size=T), rng.normal(size=T)
            d = (rng.random(T) < 0.15).astype(float)
            boot = rng.normal()
            adv, _ = ppo.compute_gae(r, v, d, boot, ppo.GaeConfig(0.995, 0.98))
            worst = max(worst, float(np.max(np.abs(adv - gae_oracle(r, v, d, boot, 0.995, 0.98)))))
        return worst

    worst, dt = _timed(run)
    record(3, worst <= 1e-10 and dt < 5.0, f"max |GAE - oracle| = {worst:.2e} over 1000 episodes, {dt:.2f}s")


def test_criterion_04_ppo_identities(record):
    def run():
        rng = np.random.default_rng(1)
        p = ppo.GaussianPolicy(SPEC.obs_dim, SPEC.n_joints, rng)
        obs = rng.normal(size=(64, SPEC.obs_dim))
        act = rng.normal(size=(64, SPEC.n_joints))
        adv = rng.normal(size=64)
        r = ppo.policy_ratio(p, p.copy(), obs, act)
        m = p.mean(obs, rowwise=False)
        kl = gaussian_kl(m, p.log_std, m, p.log_std)
        same = np.array_equal(ppo.clipped_surrogate(r, adv, 0.2), r * adv)
        hand = (ppo.clipped_surrogate(np.array([1.5]), np.array([1.0]), 0.2)[0] == 1.2
                and ppo.clipped_surrogate(np.array([0.5]), np.array([-1.0]), 0.2)[0] == -0.8)
        return bool(np.all(r == 1.0) and np.all(kl == 0.0) and same and hand)

    ok, dt = _timed(run)
    record(4, ok and dt < 1.0, f"ratio=1, KL=0, clipped=unclipped, 1.2/-0.8 exact={ok}, {dt:.2f}s")


class _PolicyLoss:
    def __init__(self, policy, batch):
        self.policy, self.batch = policy, batch

    def forward(self, _):
        return ppo.ppo_loss(self.policy, *self.batch, 0.7, 0.2, backward=False)[0]

    def backward(self, _):
        ppo.ppo_loss(self.policy, *self.batch, 0.7, 0.2)

    def zero_grad(self):
        self.policy.zero_grad()

    def parameters(self):
        return self.policy.parameters()

    def gradients(self):
        return self.policy.gradients()


def test_criterion_05_gradient_checks(record):
    def run():
        from dappo.nn import gaussian_log_prob

        rng = np.random.default_rng(2)
        errs = {}
        old = ppo.GaussianPolicy(2, 1, rng, hidden=(2,))
        obs = rng.normal(size=(5, 2))
        mean = old.mean(obs, rowwise=False)
        act = mean + np.exp(old.log_std) * rng.normal(size=mean.shape)
        batch = (obs, act, gaussian_log_prob(act, mean, old.log_std), mean, np.tile(old.log_std, (5, 1)),
                 rng.normal(size=5))
        new = old.copy()
        for p in new.parameters():
            p += 0.05 * rng.normal(size=p.shape)
        errs["policy"] = finite_diff_check(_PolicyLoss(new, batch), None, lambda l: (l, None), 1e-6)

        value = ppo.ValueNet(3, rng, hidden=(4, 3))
        x, ret = rng.normal(size=(6, 3)), rng.normal(size=6)
        errs["value"] = finite_diff_check(
            value.net, x, lambda y: (0.5 * float(np.mean((y[:, 0] - ret) ** 2)), ((y[:, 0] - ret) / 6)[:, None]),
            1e-5)
        target = rng.normal(size=(4, 3))
        sq = lambda y: (0.5 * float(np.sum((y - target) ** 2)), y - target)
        errs["dense"] = finite_diff_check(MLP((5, 4, 3), "tanh", "linear", rng), rng.normal(size=(4, 5)), sq, 1e-5)
        cell = LSTMCell(3, 3, rng)
        errs["lstm"] = finite_diff_check(cell, rng.normal(size=(4, 6, 3)), sq, 1e-5)
        return errs

    errs, dt = _timed(run)
    worst = max(errs.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    record(5, worst < 1e-4 and dt < 30.0, f"max relative gap {detail}, {dt:.2f}s")


def test_criterion_06_paired_zero(record, expert):
    def run():
        cfg = dg.CollectionConfig(n_rollouts=20, n_timesteps=30, seed_base=7)
        a = dg.collect_samples(cfg, SPEC, expert)
        b = dg.collect_samples(cfg, SPEC, expert)
        zero = bool(np.all(a.X[a.labels == 0] == 0.0))
        count = len(a) == 20 * 33
        same = a.X.tobytes() == b.X.tobytes() and np.array_equal(a.labels, b.labels)
        return zero, count, same

    (zero, count, same), dt = _timed(run)
    record(6, zero and count and same and dt < 30.0,
           f"healthy B samples zero={zero}, count=n_rollouts*D {count}, bit-identical={same}, {dt:.2f}s")


def _collect(expert, seed, n_rollouts, T, class_ids=None, methods=("B",)):
    base = 1_000_003 * seed
    cfg = dg.CollectionConfig(n_rollouts=n_rollouts, n_timesteps=T, seed_base=base, class_ids=class_ids)
    return dg.collect_samples(cfg, SPEC, expert, methods=methods)


def test_criterion_07_diagnosis_accuracy(record, expert):
    def run():
        small = []
        for seed in SEEDS:
            s = _collect(expert, seed, 200, 30, class_ids=(0, 1, 2))["B"]
            _, rep = dg.train_classifier(s, seed=seed, n_classes=33)
            small.append(rep.val_accuracy)
        full = _collect(expert, 0, 500, 50)["B"]
        _, rep = dg.train_classifier(full, seed=0)
        return small, rep.val_accuracy

    (small, full), dt = _timed(run)
    ok = min(small) >= 0.90 and full >= 0.60 and dt < 900
    record(7, ok, f"3-class accuracy per seed {[round(a, 4) for a in small]}, 33-class {full:.4f}, {dt:.0f}s")


def test_criterion_08_method_b_vs_a(record, expert):
    def run():
        acc = {"A": [], "B": []}
        for seed in SEEDS:
            sets = _collect(expert, seed, 200, 30, methods=("A", "B"))
            for m in ("A", "B"):
                _, rep = dg.train_classifier(sets[m], seed=seed)
                acc[m].append(rep.val_accuracy)
        return acc

    acc, dt = _timed(run)
    a, b = float(np.mean(acc["A"])), float(np.mean(acc["B"]))
    record(8, b >= a and dt < 1200, f"mean accuracy B {b:.4f} vs A {a:.4f} over 3 seeds, {dt:.0f}s")


def _forward_per_class(policy, aware):
    _, fwd = ppo.evaluate_policy(policy, SPEC, range(33), EVAL_SEEDS, aware)
    return fwd.mean(axis=1)


def test_criterion_09_awareness_gain(record, trained):
    policies, train_time = trained
    (res, dt) = _timed(lambda: [(_forward_per_class(policies[s, True], True),
                                 _forward_per_class(policies[s, False], False)) for s in SEEDS])
    da = np.mean([r[0] for r in res], axis=0)
    un = np.mean([r[1] for r in res], axis=0)
    from dappo.report import compare

    c = compare(da, un)
    total = train_time + dt
    ok = c["improvement_pct"] >= 10.0 and c["win_rate"] >= 0.55 and total < 5400
    record(9, ok, f"DA-PPO {c['mean_dappo']:.3f} vs unaware {c['mean_unaware']:.3f}: "
                  f"{c['improvement_pct']:+.1f}%, win rate {c['win_rate']:.3f}, {total:.0f}s")


class OracleClassifier:
    def __init__(self, truth):
        self.truth, self.calls = truth, 0

    def __call__(self, probe):
        self.calls += 1
        post = np.zeros(33)
        post[self.truth] = 1.0
        return self.truth, post


def test_criterion_10_single_trial(record, trained, expert):
    policy = trained[0][0, True]
    T, seed, event_ep = 30, 0, 10

    def run():
        fwd = _forward_per_class(policy, True)
        worst = int(np.argmin(fwd))
        baseline = control.calibrate_baseline(policy, SPEC, 10, seed, signal="forward")
        oracle = OracleClassifier(worst)
        rows, agent = control.deploy(policy, oracle, expert, SPEC, 100, {event_ep: worst}, T, seed, baseline,
                                     signal="forward")
        diag = [r["episode"] for r in rows if r["diagnosed_class"] is not None]
        parity = False
        if diag:
            post = [r["reward"] for r in rows[diag[0]:]]
            ref, _ = ppo.evaluate_policy(policy, SPEC, [worst], [seed + e for e in range(diag[0], 100)], True)
            parity = post == ref[0].tolist()
        return worst, oracle.calls, agent.probe_steps, parity

    (worst, calls, steps, parity), dt = _timed(run)
    ok = calls == 1 and steps == T and parity and dt < 300
    record(10, ok, f"event class {worst}: probes {calls} ({steps} steps), oracle parity={parity}, {dt:.0f}s")


def test_criterion_11_curriculum(record):
    def run():
        col = ppo.RolloutCollector(SPEC, RewardConfig.quad(), 8, 0, True)
        col.bodies = Bodies([apply_damage(SPEC, dmg.class_from_id(0, 4))] * 8)
        sampler = col.sampler
        group = {c: g for g, ids in sampler.groups.items() for c in ids}
        worst = 0.0
        N = 10_000
        for stage, mix in ppo.STAGE_MIXES.items():
            counts = np.zeros(33, dtype=int)
            for _ in range(N // 8):
                col.start_episodes(list(range(8)), stage)
                np.add.at(counts, col.classes, 1)
            if mix is None:
                expected = {c: 1 / 33 for c in range(33)}
                observed = {c: counts[c] for c in range(33)}
            else:
                expected = dict(zip(("healthy", "single", "multi"), mix))
                observed = {g: sum(counts[c] for c in ids) for g, ids in sampler.groups.items()}
            for key, p in expected.items():
                sd = math.sqrt(N * p * (1 - p))
                gap = abs(observed[key] - N * p)
                if sd == 0:
                    if gap:
                        return float("inf")
                else:
                    worst = max(worst, gap / sd)
        return worst

    worst, dt = _timed(run)
    record(11, worst <= 3.0 and dt < 60, f"largest deviation {worst:.2f} sigma over stages I-IV, {dt:.1f}s")


TINY = {
    "seeds": [0], "robot_spec": {"max_steps": 30},
    "ppo": {"batch_timesteps": 256, "minibatch": 64, "epochs": 2, "value_epochs": 2},
    "stages": [["I", 1], ["II", 1], ["III", 1], ["IV", 1]],
    "expert": {"iterations": 2},
    "collection": {"n_rollouts": 3, "n_timesteps": 10},
    "diagnose": {"grid_timesteps": [5, 10], "grid_rollouts": [2, 3],
                 "train": {"epochs": 2, "proj": 16, "hidden": 8, "dense": [16]}},
    "evaluate": {"episodes": 2},
    "control": {"episodes": 6, "events": {"2": 5}, "probe_timesteps": 5, "baseline_episodes": 2},
}


def test_criterion_12_determinism(record, tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    for run in ("a", "b"):
        for cmd in cli.COMMANDS:
            assert cli.main([cmd, "--config", str(cfg), "--out", str(tmp_path / run)]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    data = [f for f in files if f.suffix in (".csv", ".json", ".jsonl")]
    differ = [str(f) for f in files if not filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)]
    record(12, len(data) >= 10 and not differ,
           f"{len(data)} CSV/JSON outputs from {len(cli.COMMANDS)} subcommands, differing files {differ}")
