"""Deployment in the target environment and experiment orchestration.

A trained policy is evaluated with deterministic actions in the target
environment.  Methods with a grounded latent space observe the target
only through the aligned target encoder; direct-transfer and
domain-randomization policies observe abstracted target states through
their own recurrent state.  Deployment never injects state into the
target environment.

The orchestration layer runs full per-method pipelines (ground -> align
-> train -> deploy) across seeds, the grounding-mode ablation, and the
data-efficiency sweep, writing a fixed-format summary.csv plus per-run
artifacts under ``runs/<env>/<method>/<seed>/``.  Reports are a pure
function of (config, seeds, dataset): re-running is byte-identical.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy import stats

from . import config as cfgmod
from .alignment import TargetEncoder, align
from .data import Dataset, subsample
from .envs import EnvPair
from .grounding import AstraModel, train_grounding
from .policy import (
    AbstractRollouts, DrConfig, GroundedRollouts, Policy, PpoConfig,
    train_policy,
)

log = logging.getLogger(__name__)

METHODS = ("dt", "dr", "nas", "astra")
ABLATION_MODES = ("full", "no_trans", "no_rew", "nas")

_METHOD_MODE = {"astra": "full", "astra_no_trans": "no_trans",
                "astra_no_rew": "no_rew", "nas": "nas"}
# modes whose reward head is untrained fall back to the simulator reward
_ENV_REWARD_MODES = {"nas", "no_rew"}

SUMMARY_COLUMNS = ("method", "env_pair", "seed", "fraction", "episodes",
                   "successes", "success_rate", "ci_low", "ci_high",
                   "mean_distance", "mean_length", "config_hash", "failed")


# ---------------------------------------------------------------------------
# statistics

def wilson_interval(successes, n, z=1.959963984540054):
    """95% Wilson score interval for a binomial proportion."""
    if n <= 0:
        raise ValueError("n must be positive")
    if not 0 <= successes <= n:
        raise ValueError("successes out of range")
    p = successes / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def welch_one_sided(greater, lesser) -> float:
    """One-sided Welch t-test p-value for mean(greater) > mean(lesser)."""
    greater, lesser = np.asarray(greater, float), np.asarray(lesser, float)
    if len(greater) < 2 or len(lesser) < 2:
        raise ValueError("Welch test needs >= 2 samples per group")
    res = stats.ttest_ind(greater, lesser, equal_var=False,
                          alternative="greater")
    return float(res.pvalue)


# ---------------------------------------------------------------------------
# reports

@dataclass(frozen=True, eq=False)
class EvalReport:
    method: str
    env_pair: str
    seed: int
    fraction: float
    episodes: int
    successes: int
    success_rate: float
    ci_low: float
    ci_high: float
    mean_distance: float     # successes only; nan when no successes
    mean_length: float
    config_hash: str = ""
    failed: bool = False

    def __eq__(self, other):
        """Field-wise equality with NaN == NaN (no-success runs have a
        NaN mean distance and must still compare equal)."""
        if not isinstance(other, EvalReport):
            return NotImplemented
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if (isinstance(a, float) and isinstance(b, float)
                    and np.isnan(a) and np.isnan(b)):
                continue
            if a != b:
                return False
        return True


def _round6(x):
    return float(f"{float(x):.6f}")


def write_report(reports, path):
    """Fixed-format summary CSV; float fields printed with 6 decimals so
    identical reports serialize byte-identically."""
    if not reports:
        raise ValueError("write_report needs at least one report")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for r in reports:
            writer.writerow([
                r.method, r.env_pair, r.seed, f"{r.fraction:.6f}",
                r.episodes, r.successes, f"{r.success_rate:.6f}",
                f"{r.ci_low:.6f}", f"{r.ci_high:.6f}",
                f"{r.mean_distance:.6f}", f"{r.mean_length:.6f}",
                r.config_hash, int(r.failed),
            ])


def parse_report(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != SUMMARY_COLUMNS:
            raise IOError(f"unexpected summary header: {header}")
        out = []
        for row in reader:
            out.append(EvalReport(
                method=row[0], env_pair=row[1], seed=int(row[2]),
                fraction=float(row[3]), episodes=int(row[4]),
                successes=int(row[5]), success_rate=float(row[6]),
                ci_low=float(row[7]), ci_high=float(row[8]),
                mean_distance=float(row[9]), mean_length=float(row[10]),
                config_hash=row[11], failed=bool(int(row[12]))))
    return out


# ---------------------------------------------------------------------------
# deployment

def deploy(pair: EnvPair, policy: Policy, n_episodes, seed,
           encoder: TargetEncoder | None = None, method="", fraction=1.0,
           config_hash="") -> EvalReport:
    """Evaluate a policy in the target environment with deterministic
    actions.  With an encoder, the policy consumes target-history
    latents; without one, the (recurrent) policy consumes abstracted
    target observations."""
    if encoder is not None:
        if encoder.obs_dim != pair.target_dim:
            raise ValueError(
                f"encoder obs dim {encoder.obs_dim} != target dim "
                f"{pair.target_dim}")
        if policy.recurrent or policy.obs_dim != encoder.latent_dim:
            raise ValueError("latent policy must be feedforward over the "
                             f"encoder latent ({encoder.latent_dim})")
    else:
        if not policy.recurrent or policy.obs_dim != pair.abstract_dim:
            raise ValueError("encoder-free deployment needs a recurrent "
                             "policy over abstract observations")
    env = pair.make_target()
    successes = 0
    distances = []
    lengths = []
    pos_dim = 2 if pair.planar else 1
    for ep in range(n_episodes):
        ep_seed = int(np.random.SeedSequence([seed, 9000 + ep])
                      .generate_state(1)[0])
        obs = env.reset(ep_seed)
        prev_a = np.zeros(pair.action_dim)
        if encoder is not None:
            h = encoder.init_hidden(1)
        else:
            h = policy.initial_state(1)
        dist = 0.0
        done = False
        info = {}
        while not done:
            if encoder is not None:
                h, z = encoder.encode_step(h, obs[None], prev_a[None])
                a = policy.act(z)[0]
            else:
                h, feats = policy.features(h, pair.phi(obs)[None],
                                           prev_a[None])
                a = policy.act(feats)[0]
            prev_pos = obs[:pos_dim]
            obs, _, done, info = env.step(a)
            dist += float(np.linalg.norm(obs[:pos_dim] - prev_pos))
            prev_a = a
        lengths.append(env.steps_taken)
        if info.get("success"):
            successes += 1
            distances.append(dist)
    lo, hi = wilson_interval(successes, n_episodes)
    return EvalReport(
        method=method, env_pair=pair.pair_id, seed=seed,
        fraction=_round6(fraction), episodes=n_episodes,
        successes=successes, success_rate=_round6(successes / n_episodes),
        ci_low=_round6(lo), ci_high=_round6(hi),
        mean_distance=_round6(np.mean(distances)) if distances
        else float("nan"),
        mean_length=_round6(np.mean(lengths)), config_hash=config_hash)


# ---------------------------------------------------------------------------
# per-method pipeline

@dataclass(frozen=True)
class PipelineConfig:
    """Budgets for one method/seed cell; desk-scale defaults."""
    ground_epochs: int = 60
    ground_patience: int = 15
    ground_batch: int = 32
    ground_window: int = 50
    align_epochs: int = 8
    align_batches: int = 8
    align_batch_size: int = 256
    ppo_iters: int = 600
    n_envs: int = 16
    horizon: int = 128
    ppo_epochs: int = 4
    minibatch: int = 256
    entropy_coef: float = 0.03
    ppo_lr: float = 1e-3
    eval_episodes: int = 50

    def ppo(self) -> PpoConfig:
        return PpoConfig(horizon=self.horizon, epochs=self.ppo_epochs,
                         minibatch=self.minibatch,
                         entropy_coef=self.entropy_coef, lr=self.ppo_lr)


def pipeline_config_dict(pair_id, method, seed, pc: PipelineConfig,
                         fraction=1.0):
    run = {"env_pair": pair_id, "method": method, "seed": str(seed),
           "fraction": f"{fraction:.6f}"}
    budgets = {k: str(getattr(pc, k)) for k in (
        "ground_epochs", "ground_patience", "ground_batch", "ground_window",
        "align_epochs", "align_batches", "align_batch_size", "ppo_iters",
        "n_envs", "horizon", "ppo_epochs", "minibatch", "entropy_coef",
        "ppo_lr", "eval_episodes")}
    return {"run": run, "budgets": budgets}


def run_method(method, pair: EnvPair, dataset: Dataset, seed,
               out_dir=None, pc: PipelineConfig = PipelineConfig(),
               fraction=1.0) -> EvalReport:
    """Full pipeline for one method and seed; returns its report.

    Methods: dt, dr (no grounding), nas, astra, astra_no_trans,
    astra_no_rew (grounded latent pipelines differing in loss weights and
    reward source).
    """
    cfg = pipeline_config_dict(pair.pair_id, method, seed, pc, fraction)
    chash = cfgmod.config_hash(cfg)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        cfgmod.save_config(cfg, out_dir)
    curves = (out_dir / "curves.csv") if out_dir is not None else None

    if method in ("dt", "dr"):
        policy = Policy(pair.abstract_dim, pair.action_dim, seed=seed,
                        recurrent=True)
        dr = DrConfig() if method == "dr" else None
        source = AbstractRollouts(pair, n_envs=pc.n_envs, dr=dr, seed=seed)
        train_policy(policy, source, pc.ppo(), pc.ppo_iters, seed=seed,
                     log_path=curves)
        if out_dir is not None:
            policy.save(out_dir / "policy.ckpt")
        report = deploy(pair, policy, pc.eval_episodes, seed=seed,
                        method=method, fraction=fraction, config_hash=chash)
    elif method in _METHOD_MODE:
        mode = _METHOD_MODE[method]
        model = AstraModel(pair.abstract_dim, pair.action_dim, seed=seed)
        train_grounding(
            model, dataset, pair, mode=mode, epochs=pc.ground_epochs,
            patience=pc.ground_patience, window=pc.ground_window,
            batch_size=pc.ground_batch, seed=seed,
            log_path=(out_dir / "grounding.csv") if out_dir else None)
        reward_source = "env" if mode in _ENV_REWARD_MODES else "pred"
        policy = Policy(model.latent_dim, pair.action_dim, seed=seed,
                        recurrent=False)
        source = GroundedRollouts(pair, model, n_envs=pc.n_envs,
                                  reward_source=reward_source, seed=seed)
        train_policy(policy, source, pc.ppo(), pc.ppo_iters, seed=seed,
                     log_path=curves)
        encoder = TargetEncoder(pair.target_dim, pair.action_dim, seed=seed)
        encoder.warm_start(model, dataset)
        align(encoder, model, dataset, pair, epochs=pc.align_epochs,
              batch_size=pc.align_batch_size,
              batches_per_epoch=pc.align_batches, seed=seed,
              log_path=(out_dir / "alignment.csv") if out_dir else None)
        if out_dir is not None:
            model.save(out_dir / "model.ckpt")
            policy.save(out_dir / "policy.ckpt")
            encoder.save(out_dir / "encoder.ckpt")
        report = deploy(pair, policy, pc.eval_episodes, seed=seed,
                        encoder=encoder, method=method, fraction=fraction,
                        config_hash=chash)
    else:
        raise ValueError(f"unknown method {method!r}")
    if out_dir is not None:
        write_report([report], out_dir / "report.csv")
    return report


def _failed_report(method, pair, seed, fraction=1.0):
    return EvalReport(method=method, env_pair=pair.pair_id, seed=seed,
                      fraction=_round6(fraction), episodes=0, successes=0,
                      success_rate=0.0, ci_low=0.0, ci_high=0.0,
                      mean_distance=float("nan"), mean_length=0.0,
                      failed=True)


def _run_cells(cells, jobs):
    """Run (label, callable) cells, serially or in a thread pool; a failed
    cell yields a failure report instead of aborting the rest."""

    def run_one(cell):
        label, fn, fallback = cell
        try:
            return fn()
        except Exception:
            log.exception("cell %s failed", label)
            return fallback()

    if jobs <= 1:
        return [run_one(c) for c in cells]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_one, cells))


def compare_methods(pair: EnvPair, methods, seeds, dataset: Dataset,
                    out_root=None, pc: PipelineConfig = PipelineConfig(),
                    jobs=1):
    """Run every method over every seed; returns reports in a fixed
    (method-major, seed-minor) order and writes summary.csv."""
    cells = []
    for method in methods:
        for seed in seeds:
            out_dir = (Path(out_root) / pair.pair_id / method / str(seed)
                       if out_root is not None else None)
            cells.append((
                f"{method}/{seed}",
                lambda m=method, s=seed, o=out_dir:
                    run_method(m, pair, dataset, s, out_dir=o, pc=pc),
                lambda m=method, s=seed: _failed_report(m, pair, s),
            ))
    reports = _run_cells(cells, jobs)
    if out_root is not None:
        write_report(reports, Path(out_root) / "summary.csv")
    return reports


def run_ablation(pair: EnvPair, modes, seeds, dataset: Dataset,
                 out_root=None, pc: PipelineConfig = PipelineConfig(),
                 jobs=1):
    """Grounding-mode ablation; modes map onto grounded methods."""
    mode_to_method = {"full": "astra", "no_trans": "astra_no_trans",
                      "no_rew": "astra_no_rew", "nas": "nas"}
    unknown = [m for m in modes if m not in mode_to_method]
    if unknown:
        raise ValueError(f"unknown ablation modes {unknown}")
    return compare_methods(pair, [mode_to_method[m] for m in modes], seeds,
                           dataset, out_root=out_root, pc=pc, jobs=jobs)


def run_data_sweep(pair: EnvPair, fractions, seeds, pool: Dataset,
                   baseline: int, out_root=None,
                   pc: PipelineConfig = PipelineConfig(), jobs=1,
                   subsample_seed=0):
    """Data-efficiency sweep with nested subsampling.

    ``pool`` must hold at least max(fractions) * baseline paired
    trajectories; every fraction uses a prefix of one seeded permutation,
    so smaller fractions are nested in larger ones.  Returns
    (sorted fractions, per-fraction reports, curve rows).
    """
    fractions = sorted(float(f) for f in fractions)
    cells = []
    for fraction in fractions:
        ds = subsample(pool, fraction, seed=subsample_seed, baseline=baseline)
        for seed in seeds:
            out_dir = (Path(out_root) / pair.pair_id
                       / f"astra_f{fraction:g}" / str(seed)
                       if out_root is not None else None)
            cells.append((
                f"f{fraction:g}/{seed}",
                lambda d=ds, s=seed, o=out_dir, f=fraction:
                    run_method("astra", pair, d, s, out_dir=o, pc=pc,
                               fraction=f),
                lambda s=seed, f=fraction:
                    _failed_report("astra", pair, s, fraction=f),
            ))
    reports = _run_cells(cells, jobs)
    curve = []
    for fraction in fractions:
        rows = [r for r in reports if np.isclose(r.fraction, fraction)]
        rates = [r.success_rate for r in rows if not r.failed]
        curve.append({
            "fraction": fraction,
            "mean_success": _round6(np.mean(rates)) if rates else float("nan"),
            "std_success": _round6(np.std(rates)) if rates else float("nan"),
            "n_seeds": len(rates),
        })
    if out_root is not None:
        write_report(reports, Path(out_root) / "summary.csv")
        _write_sweep_curve(curve, Path(out_root) / "sweep_curve.csv")
    return fractions, reports, curve


def _write_sweep_curve(curve, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fraction", "mean_success", "std_success",
                         "n_seeds"])
        for row in curve:
            writer.writerow([f"{row['fraction']:.6f}",
                             f"{row['mean_success']:.6f}",
                             f"{row['std_success']:.6f}", row["n_seeds"]])


def write_coverage_csv(dataset: Dataset, maze, path, n=10):
    """Grid visit counts; the CSV total equals the number of recorded
    states."""
    from .data import coverage_histogram

    hist = coverage_histogram(dataset, maze, n=n)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_x", "cell_y", "visits"])
        for i in range(n):
            for j in range(n):
                writer.writerow([i, j, int(hist[i, j])])
    return int(hist.sum())
