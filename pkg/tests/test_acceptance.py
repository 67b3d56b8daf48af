"""Acceptance suite: one PASS/FAIL line per criterion.

Lines are printed as each test runs (visible with ``-s``) and collected into
the terminal summary under "acceptance criteria".
"""

import io
import math
import os
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from imitlab.cli import main
from imitlab.config import ExperimentConfig, Schedule, load_config
from imitlab.core import Context, TaskInstance
from imitlab.env import ChainRepair, ChainRepairSpec, TokenEdit, TokenEditSpec, exact_success_prob, substream
from imitlab.metrics import bootstrap_slope_win_rate
from imitlab.objectives import MethodSpec, WeightedExample, ce_loss, pack_shared_prefix, packed_loss, unified_loss, weight_pg_group
from imitlab.policy import SamplingConfig, SoftmaxPolicy, grad_add, init_params, save_params
from imitlab.rollout import PLAN_STREAM, RegimeConfig, prefix_plan
from imitlab.studies import horizon_scaling_study, median_curve, sample_scaling_curve
from imitlab.trainer import Trainer, TrainState, beta_schedule, rho_schedule

from conftest import ACCEPTANCE, mixed_trajectory, random_policy

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
WORKERS = os.cpu_count() or 1
FULL = SamplingConfig(temperature=1.0)


def verdict(n: int, title: str, ok: bool, detail: str, elapsed: float | None = None, limit: float | None = None):
    if limit is not None:
        detail += f"; {elapsed:.1f} s (limit {limit:.0f} s)"
        ok = ok and elapsed < limit
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title} -- {detail}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. indicator samplers


def test_criterion_1_indicator_sampler_exactness():
    t0 = time.perf_counter()
    T, n = 40, 10_000
    worst = {}
    ok = True
    for beta in (0.0, 0.6, 1.0):
        regime = RegimeConfig("turn", beta=beta)
        plans = np.array([regime.plan(T, substream(0, i, 0, PLAN_STREAM)).indicators for i in range(n)])
        rates = plans.mean(axis=0)
        se = math.sqrt(beta * (1 - beta) / n)
        dev = np.abs(rates - beta)
        worst[beta] = float(dev.max() / se) if se > 0 else float(dev.max())
        ok &= bool(np.all(dev <= 3 * se))
    # prefix plans: exact 0^kappa 1^(T - kappa) for every kappa drawn by the schedule
    kappas = set()
    for i in range(1, 6):
        regime = RegimeConfig("traj", rho=tuple(rho_schedule(i, T)))
        for r in range(2000):
            plan = regime.plan(T, substream(0, r, i, PLAN_STREAM))
            k = int(plan.parameter)
            kappas.add(k)
            ok &= plan.indicators == (0,) * k + (1,) * (T - k) and plan == prefix_plan(k, T)
    ok &= kappas == set(range(T + 1))
    verdict(
        1, "indicator-sampler exactness", ok,
        f"max |rate-beta|/SE: beta=0.6 -> {worst[0.6]:.2f}; beta=0,1 exact deviation {worst[0.0]:.0f},{worst[1.0]:.0f}; "
        f"{len(kappas)} distinct kappa values, all prefix plans exact",
        time.perf_counter() - t0, 10,
    )


# ---------------------------------------------------------------------------
# 2. schedules


def test_criterion_2_schedule_exactness():
    betas = [beta_schedule(i) for i in range(1, 11)]
    expected = [max(0.6, 1.0 - 0.2 * (i - 1)) for i in range(1, 11)]
    rho = rho_schedule(1, 40, Schedule())
    dev = float(np.abs(rho - 1.0 / 41).max())
    ok = betas == expected and len(rho) == 41 and dev == 0.0
    verdict(2, "schedule exactness", ok, f"beta_1..10 = {betas}; rho_1 max deviation from Unif{{0..40}} = {dev}")


# ---------------------------------------------------------------------------
# 3. packing


def test_criterion_3_packing_gradient_equivalence():
    t0 = time.perf_counter()
    env = TokenEdit(TokenEditSpec(T_max=10, V=8, M=3))
    worst = 0.0
    n_seq = n_tr = 0
    for seed in range(100):
        _, batch = mixed_trajectory(env, seed, beta=0.5, eps=0.2, instance_id=seed)
        policy = random_policy(env, np.random.default_rng(10_000 + seed))
        packed = pack_shared_prefix(batch, env.action_space)
        n_seq += len(packed)
        n_tr += len(batch)
        loss, g = packed_loss(policy, packed)
        ref_loss, ref = 0.0, {}
        for tr in batch:
            l, gi = ce_loss(policy, tr)
            ref_loss += l
            grad_add(ref, gi)
        assert set(g) == set(ref)
        for k in ref:
            worst = max(worst, float(np.abs(g[k] - ref[k]).max() / np.abs(ref[k]).max()))
        worst = max(worst, abs(loss - ref_loss) / abs(ref_loss))
    verdict(
        3, "packing-gradient equivalence", worst <= 1e-10,
        f"100 trajectories, {n_tr} transitions in {n_seq} packed sequences; max relative error {worst:.2e}",
        time.perf_counter() - t0, 30,
    )


# ---------------------------------------------------------------------------
# 4. gradients


def _fd_worst(policy: SoftmaxPolicy, ctx: Context, action, coords, h: float = 1e-5) -> float:
    """Largest |fd - g| / max(|g|, 1e-3) over the given parameter coordinates."""
    g = policy.grad_logprob(ctx, action)
    p = policy.params
    if p.mode == "tabular":
        key = policy.context_key(ctx)
        block, gblock = p.table[key], g[key]
    else:
        block, gblock = p.weights, g["W"]
    worst = 0.0
    for idx in coords:
        orig = block[idx]
        block[idx] = orig + h
        fp = policy.logprob(ctx, action)
        block[idx] = orig - h
        fm = policy.logprob(ctx, action)
        block[idx] = orig
        fd = (fp - fm) / (2 * h)
        worst = max(worst, abs(fd - gblock[idx]) / max(abs(gblock[idx]), 1e-3))
    return worst


def test_criterion_4_gradient_correctness():
    t0 = time.perf_counter()
    env = TokenEdit(TokenEditSpec(T_max=10, V=8, M=3))
    actions = env.action_space.enumerate()
    contexts = []
    for s in range(40):
        traj, _ = mixed_trajectory(env, s, beta=0.5, eps=0.3, instance_id=s)
        contexts.extend(traj.contexts)
    rng = np.random.default_rng(2024)
    worst_fd = 0.0
    n = 0
    for trial in range(1000):
        mode = "tabular" if trial % 2 == 0 else "linear"
        ctx = contexts[rng.integers(len(contexts))]
        params = init_params(env, mode, scale=2.0, rng=rng)
        policy = SoftmaxPolicy(params, env)
        if mode == "tabular":
            params.table[policy.context_key(ctx)] = 2.0 * rng.standard_normal((env.action_space.max_len, env.action_space.vocab_size))
            coords = list(np.ndindex(*params.table[policy.context_key(ctx)].shape))
        else:
            active = np.flatnonzero(env.features(ctx))
            idle = rng.choice(np.flatnonzero(env.features(ctx) == 0), size=2, replace=False)
            M, _, V = params.weights.shape
            coords = [(m, f, v) for m in range(M) for f in [*active, *idle] for v in range(V)]
        action = actions[rng.integers(len(actions))] if rng.random() < 0.5 else policy.sample_action(ctx, FULL, rng)
        worst_fd = max(worst_fd, _fd_worst(policy, ctx, action, coords))
        n += 1
    # expected score under the policy's own distribution, by exhaustive enumeration
    worst_score = 0.0
    for trial in range(20):
        mode = "tabular" if trial % 2 == 0 else "linear"
        params = init_params(env, mode, scale=2.0, rng=rng)
        policy = SoftmaxPolicy(params, env)
        ctx = contexts[rng.integers(len(contexts))]
        if mode == "tabular":
            params.table[policy.context_key(ctx)] = 2.0 * rng.standard_normal((env.action_space.max_len, env.action_space.vocab_size))
        total: dict = {}
        dist = policy.action_distribution(ctx)
        assert len(dist) == len(actions)
        for a, p in dist:
            grad_add(total, policy.grad_logprob(ctx, a), p)
        worst_score = max(worst_score, max(float(np.abs(v).max()) for v in total.values()))
    ok = worst_fd <= 1e-6 and worst_score <= 1e-10
    verdict(
        4, "gradient correctness", ok,
        f"{n} FD triples, max relative error {worst_fd:.2e} (denominator floor 1e-3); "
        f"max |E[score]| {worst_score:.2e} over 20 enumerated contexts",
        time.perf_counter() - t0, 60,
    )


# ---------------------------------------------------------------------------
# 5. unified view


def _base(method, **env):
    return ExperimentConfig(experiment_id="accept", seed=11).with_overrides(
        env={"T_max": 10, **env},
        method={"kind": method},
        schedule={"batch_instances": 32, "iterations": 3, "epochs_per_batch": 2, "beta_init": 1.0, "beta_floor": 1.0},
        eval={"heldout_instances": 20, "kl_rollouts": 10},
    )


def _multisets(cfg):
    tr = Trainer(cfg)
    state = TrainState(tr.initial_params())
    out = []
    for _ in range(cfg.schedule.iterations):
        state, _, _, _ = tr.run_iteration(state)
        out.append(Counter((ex.context, ex.action, ex.weight) for ex in state.examples))
    return out, _params_text(state.params)


def test_criterion_5_unified_view_instantiation():
    t0 = time.perf_counter()
    # (a) dagger at beta = 1 is the sft pipeline, iteration by iteration
    same_a = []
    for env_kind, extra in (("chain_repair", {}), ("token_edit", {"V": 8, "M": 3})):
        for noise in (0.0, 0.2):
            env = {"kind": env_kind, "teacher_noise": noise, **extra}
            over = {} if noise == 0 else {"filter_mode": "valid_submission"}
            sft = _multisets(_base("sft", **env).with_overrides(method={"kind": "sft", **over}))
            dag = _multisets(_base("dagger_turn", **env).with_overrides(method={"kind": "dagger_turn", **over}))
            same_a.append(sft == dag and sum(sum(m.values()) for m in sft[0]) > 0)
    # (b) opd weights against direct evaluation of both distributions
    worst_b, n_b = 0.0, 0
    for env in ({"kind": "chain_repair", "teacher_noise": 0.2}, {"kind": "token_edit", "V": 8, "M": 3, "teacher_noise": 0.1}):
        cfg = _base("opd", **env)
        tr = Trainer(cfg)
        p0 = init_params(tr.env, "tabular", scale=1.0, rng=np.random.default_rng(5))
        student = tr.policy(p0)
        state, _, _, _ = tr.run_iteration(TrainState(p0))
        for ex in state.examples:
            pe = dict(tr.teacher.action_distribution(ex.context))[ex.action]
            ps = dict(student.action_distribution(ex.context))[ex.action]
            worst_b = max(worst_b, abs(ex.weight - (-math.log(ps / pe))))
            n_b += 1
    # (c) degenerate groups: all-fail and all-success rewards give no update at all
    cfg = _base("pg_grpo").with_overrides(schedule={"batch_instances": 8, "group_size": 4, "iterations": 1})
    tr = Trainer(cfg)
    params = tr.initial_params()
    params.default_row[0, tr.env.finish_token] = -np.inf  # never submits: every reward is 0
    before = _params_text(params)
    state, report, trajs, _ = tr.run_iteration(TrainState(params))
    zero_c = all(t.success == 0 for t in trajs) and all(ex.weight == 0.0 for ex in state.examples)
    zero_c &= _params_text(state.params) == before and len(state.examples) > 0
    ctx = Context.initial(TaskInstance(0, 0, 10))
    for rewards in ([1, 1, 1, 1], [0, 0, 0, 0]):
        w = weight_pg_group(rewards)
        exs = [WeightedExample(ctx, tr.env.all_actions()[k], wk) for k, wk in enumerate(w)]
        _, g = unified_loss(tr.policy(params), exs, MethodSpec("pg_grpo"))
        zero_c &= w == [0.0] * 4 and g == {}
    ok = all(same_a) and worst_b <= 1e-12 and n_b > 0 and zero_c
    verdict(
        5, "unified-view instantiation", ok,
        f"(a) dagger(beta=1) == sft in {sum(same_a)}/{len(same_a)} settings; "
        f"(b) max |w_opd + log(pi_theta/pi_e)| = {worst_b:.1e} over {n_b} examples; "
        f"(c) degenerate groups zero update: {zero_c}",
        time.perf_counter() - t0, 60,
    )


def _params_text(params) -> str:
    buf = io.StringIO()
    save_params(params, buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# 6. Monte Carlo vs DP


def test_criterion_6_monte_carlo_matches_dp():
    t0 = time.perf_counter()
    env = ChainRepair(ChainRepairSpec(T_max=3, K=2, D=1))
    instance = TaskInstance(0, 0, 3)
    actions = env.all_actions()
    # transition tables over every state reachable before the last turn, built by
    # stepping the real environment; moves out of the last level go to a sink row
    start = env.initial_state(instance)
    index, frontier = {start: 0}, [start]
    for _ in range(instance.horizon_cap - 1):
        nxt = []
        for s in frontier:
            for a in actions:
                s2 = env.step(s, a)[1]
                if s2 not in index:
                    index[s2] = len(index)
                    nxt.append(s2)
        frontier = nxt
    states = list(index)
    sink = len(states)
    step = np.array([[index.get(env.step(s, a)[1], sink) for a in actions] for s in states] + [[sink] * len(actions)])
    win = np.array([[env.judge(env.step(s, a)[1], a.is_finish) for a in actions] for s in states] + [[0] * len(actions)])
    n = 1_000_000
    rng = np.random.default_rng(6)
    cur = np.zeros(n, dtype=int)
    alive = np.ones(n, dtype=bool)
    success = np.zeros(n, dtype=bool)
    for _ in range(instance.horizon_cap):
        a = rng.integers(0, len(actions), size=n)
        success |= alive & (win[cur, a] == 1)
        alive &= a != env.finish_token
        cur = step[cur, a]
    mc = success.mean()
    uniform = SoftmaxPolicy(init_params(env), env)
    dp = exact_success_prob(uniform, env, instance)
    se = math.sqrt(dp * (1 - dp) / n)
    z = abs(mc - dp) / se
    verdict(
        6, "Monte-Carlo/DP agreement", z <= 3 and 0 < dp < 1,
        f"DP {dp:.6f}, MC {mc:.6f} over 10^6 episodes ({len(states)} states); |diff| = {z:.2f} SE",
        time.perf_counter() - t0, 60,
    )


# ---------------------------------------------------------------------------
# 7. horizon study


@pytest.mark.slow
def test_criterion_7_covariate_shift_reduction():
    t0 = time.perf_counter()
    cfg = load_config(CONFIGS / "horizon_study.toml")
    st = cfg.study
    bc, dagger = st.methods
    assert (bc, dagger) == ("sft", "dagger_turn") and len(st.seeds) >= 20 and tuple(st.horizons) == (5, 10, 20, 40)
    seeds = [cfg.seed + s for s in st.seeds]
    study = horizon_scaling_study(cfg, st.methods, st.horizons, seeds, st.budget, WORKERS)
    elapsed = time.perf_counter() - t0
    b40, d40 = study.get(bc, 40), study.get(dagger, 40)
    ok_a = d40.mean_failure < b40.mean_failure and d40.mean_failure + d40.std_failure < b40.mean_failure - b40.std_failure
    win = bootstrap_slope_win_rate(study.failures(bc), study.failures(dagger), st.bootstrap, substream(cfg.seed, 7), study.floor)
    ok_b = win >= 0.9
    ok_c = d40.median_reverse_kl < b40.median_reverse_kl
    kl_by_T = ", ".join(
        f"T={T}: {study.get(bc, T).median_reverse_kl:.3f}/{study.get(dagger, T).median_reverse_kl:.3f}" for T in st.horizons
    )
    verdict(
        7, "covariate-shift reduction", ok_a and ok_b and ok_c,
        f"(a) T=40 failure BC {b40.mean_failure:.3f}±{b40.std_failure:.3f} vs DAgger {d40.mean_failure:.3f}±{d40.std_failure:.3f}; "
        f"(b) slopes BC {study.slopes[bc]:.3f} vs DAgger {study.slopes[dagger]:.3f}, BC steeper in {win:.1%} of {st.bootstrap} resamples; "
        f"(c) median reverse KL BC/DAgger {kl_by_T}; {len(seeds)} seeds, {WORKERS} worker(s)",
        elapsed, 15 * 60,
    )


# ---------------------------------------------------------------------------
# 8. sample scaling


@pytest.mark.slow
def test_criterion_8_cold_start_ordering():
    t0 = time.perf_counter()
    cfg = load_config(CONFIGS / "scaling_study.toml")
    st = cfg.study
    assert len(st.seeds) >= 20 and "dagger_turn" in st.methods and "opd" in st.methods
    seeds = [cfg.seed + s for s in st.seeds]
    curves = {m: median_curve(sample_scaling_curve(cfg, m, st.budgets, seeds, WORKERS)) for m in ("dagger_turn", "opd")}
    elapsed = time.perf_counter() - t0
    b = min(x for x in st.budgets if x > 0)
    ok = curves["dagger_turn"][b] >= curves["opd"][b]
    shown = "; ".join(f"{m}: " + " ".join(f"{x}:{v:.2f}" for x, v in c.items()) for m, c in curves.items())
    verdict(
        8, "cold-start ordering", ok,
        f"budget {b}: median resolution dagger_turn {curves['dagger_turn'][b]:.3f} vs opd {curves['opd'][b]:.3f} "
        f"over {len(seeds)} seeds (curves {shown})",
        elapsed, 15 * 60,
    )


# ---------------------------------------------------------------------------
# 9. CLI determinism

TINY = """\
experiment_id = "determinism"
seed = 5

[env]
kind = "{env}"
T_max = 6

[method]
kind = "{method}"

[schedule]
iterations = 2
batch_instances = 12

[eval]
heldout_instances = 15
kl_rollouts = 6

[study]
methods = ["sft", "{method}"]
horizons = [4, 6]
budgets = [0, 40]
seeds = [0, 1]
budget = 60
"""


def _tree(d: Path) -> dict[str, bytes]:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_criterion_9_cli_determinism(tmp_path):
    checked = []
    all_same = True
    for env, method in (("chain_repair", "dagger_turn"), ("token_edit", "aggrevate_traj"), ("chain_repair", "opd"), ("chain_repair", "pg_grpo")):
        cfg = tmp_path / f"{env}_{method}.toml"
        cfg.write_text(TINY.format(env=env, method=method))
        commands = {
            "train": lambda out, w: ["train", "--config", str(cfg), "--workers", str(w), "--out", str(out)],
            "study horizon": lambda out, w: ["study", "horizon", "--config", str(cfg), "--workers", str(w), "--out", str(out)],
            "study scaling": lambda out, w: ["study", "scaling", "--config", str(cfg), "--workers", str(w), "--out", str(out)],
        }
        for name, argv in commands.items():
            trees = []
            for run, workers in enumerate((1, 1, 2)):
                out = tmp_path / f"{cfg.stem}-{name.replace(' ', '_')}-{run}"
                assert main(argv(out, workers)) == 0
                trees.append(_tree(out))
            all_same &= trees[0] == trees[1] == trees[2] and len(trees[0]) > 0
            checked.append(f"{name}")
        train_dir = tmp_path / f"{cfg.stem}-train-0"
        evals = []
        for run, workers in enumerate((1, 1, 2)):
            out = tmp_path / f"{cfg.stem}-eval-{run}"
            assert main(["eval", "--config", str(cfg), "--checkpoint", str(train_dir / "final.params"), "--workers", str(workers), "--out", str(out)]) == 0
            evals.append(_tree(out))
        replays = []
        for run in range(2):
            out = tmp_path / f"{cfg.stem}-replay-{run}.txt"
            assert main(["replay", str(train_dir / "trajectories.tsv"), "--out", str(out)]) == 0
            replays.append(out.read_bytes())
        all_same &= evals[0] == evals[1] == evals[2] and replays[0] == replays[1]
        checked += ["eval", "replay"]
    verdict(
        9, "CLI determinism", all_same,
        f"{len(checked)} subcommand runs over 4 configs (train, study horizon, study scaling, eval, replay) "
        f"byte-identical across repeats and --workers 1/2",
    )
