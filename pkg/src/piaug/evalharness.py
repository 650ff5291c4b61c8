"""Evaluation protocol: multi-step prediction errors, attribute binning
into 27 subgroups, domain-shift curves across velocity groups, closed-loop
figure-8 navigation, and the shared-encoding rollout micro-benchmark.
"""

from __future__ import annotations

import dataclasses
import json
import time
from typing import Sequence

import numpy as np

from . import kbm as kbm_mod
from . import model as nn_mod
from . import mppi as mppi_mod
from .augment import DataSequence
from .kbm import KbmParams
from .mppi import MppiConfig, MppiController, WaypointPlan, figure_eight_plan
from .state import crop_observation, kbm_project_rows, wrap_angle
from .worldsim import SimParams, Terrain, initial_sim_state, sim_step, to_full_state

GROUPS = ("low", "med", "high")


@dataclasses.dataclass(frozen=True)
class BinSpec:
    """Thresholds splitting mean |speed|, |pitch|, and |yaw rate| into
    low/med/high groups; upper bounds are inclusive."""

    v_edges: tuple[float, float] = (3.0, 5.0)
    theta_edges: tuple[float, float] = (0.05, 0.12)
    psi_edges: tuple[float, float] = (0.05, 0.12)

    @staticmethod
    def _group(x: float, edges: tuple[float, float]) -> str:
        if x <= edges[0]:
            return "low"
        if x <= edges[1]:
            return "med"
        return "high"

    def classify(self, v: float, theta: float, psi_rate: float):
        return (self._group(v, self.v_edges),
                self._group(theta, self.theta_edges),
                self._group(psi_rate, self.psi_edges))


@dataclasses.dataclass(frozen=True)
class ErrorReport:
    """Per-sequence position/yaw/speed errors averaged over the horizon."""

    delta_p: float
    delta_psi: float
    delta_v: float


def sequence_attributes(seq: DataSequence, dt: float = 0.1):
    """Mean |speed|, |pitch|, |yaw rate| of a sequence's ground truth."""
    labels = seq.labels
    v = float(np.mean(np.abs(labels[:, 9])))
    pitch = float(np.mean(np.abs(np.arcsin(np.clip(-labels[:, 5], -1.0, 1.0)))))
    yaws = np.concatenate([[np.arctan2(seq.x0.r6[1], seq.x0.r6[0])],
                           np.arctan2(labels[:, 4], labels[:, 3])])
    rates = wrap_angle(np.diff(yaws)) / dt
    return v, pitch, float(np.mean(np.abs(rates)))


# ---------------------------------------------------------------------------
# prediction models


class KbmPredictor:
    """Bicycle-model multi-step prediction.

    The bicycle model reads only low-dimensional state, so the pitch it
    uses over the rollout is the one measured at the initial state (it has
    no map to look ahead with), matching how the controller deploys it.
    """

    name = "kbm"

    def __init__(self, params: KbmParams):
        self.params = params

    def predict_kbm_batch(self, seqs: Sequence[DataSequence]) -> np.ndarray:
        x0 = np.array([np.concatenate([s.x0.p[0:2],
                                       [np.arctan2(s.x0.r6[1], s.x0.r6[0])],
                                       [s.x0.v[0]], [s.x0.delta]]) for s in seqs])
        actions = np.array([s.actions for s in seqs])
        pitch0 = np.array([np.arcsin(np.clip(-s.x0.r6[2], -1.0, 1.0)) for s in seqs])

        def provider(x, y, step):
            return pitch0

        return kbm_mod.rollout_array(x0, actions, provider, self.params)


class NeuralPredictor:
    """Learned-model multi-step prediction projected to the bicycle state."""

    def __init__(self, params: nn_mod.ModelParams, name: str = "neural"):
        self.params = params
        self.name = name

    def predict_kbm_batch(self, seqs: Sequence[DataSequence]) -> np.ndarray:
        x0 = np.array([s.x0.as_array() for s in seqs])
        patches = np.array([s.obs.height_patch for s in seqs])
        actions = np.array([s.actions for s in seqs])
        latents = nn_mod.encode_batch(self.params, patches)
        preds = nn_mod.rollout(self.params, x0, latents, actions)
        return nn_mod.project_to_kbm(preds)


def prediction_errors(predictor, eval_set: Sequence[DataSequence]
                      ) -> tuple[list[ErrorReport], int]:
    """Roll the model out on every sequence and average per-step errors.

    Returns the reports plus the count of flagged (non-finite) sequences,
    which are excluded and reported as NaN rows.
    """
    if not eval_set:
        raise ValueError("empty evaluation set")
    preds = predictor.predict_kbm_batch(eval_set)
    truth = np.array([kbm_project_rows(s.labels) for s in eval_set])
    dp = np.hypot(preds[:, :, 0] - truth[:, :, 0], preds[:, :, 1] - truth[:, :, 1])
    dpsi = np.abs(wrap_angle(preds[:, :, 2] - truth[:, :, 2]))
    dv = np.abs(preds[:, :, 3] - truth[:, :, 3])
    ok = np.all(np.isfinite(preds), axis=(1, 2))
    reports = []
    for i in range(len(eval_set)):
        if ok[i]:
            reports.append(ErrorReport(float(dp[i].mean()), float(dpsi[i].mean()),
                                       float(dv[i].mean())))
        else:
            reports.append(ErrorReport(float("nan"), float("nan"), float("nan")))
    return reports, int(np.sum(~ok))


PAPER_MASKED_CELL = ("high", "low", "high")  # (V, Theta, Psi) withheld on the real robot


def bin_and_aggregate(reports: Sequence[ErrorReport], eval_set: Sequence[DataSequence],
                      spec: BinSpec = BinSpec(), dt: float = 0.1) -> list[dict]:
    """Mean errors per (velocity, pitch, yaw-rate) subgroup; 27 rows.

    Cells with no sequences carry NaN means and n=0.
    """
    if len(reports) != len(eval_set):
        raise ValueError("reports and eval_set must align")
    table = {(v, t, p): [] for v in GROUPS for t in GROUPS for p in GROUPS}
    for rep, seq in zip(reports, eval_set):
        if not np.isfinite(rep.delta_p):
            continue
        key = spec.classify(*sequence_attributes(seq, dt))
        table[key].append(rep)
    rows = []
    for v in GROUPS:
        for t in GROUPS:
            for p in GROUPS:
                cell = table[(v, t, p)]
                n = len(cell)
                rows.append(dict(
                    v_bin=v, theta_bin=t, psi_bin=p, n=n,
                    dp=float(np.mean([r.delta_p for r in cell])) if n else float("nan"),
                    dpsi=float(np.mean([r.delta_psi for r in cell])) if n else float("nan"),
                    dv=float(np.mean([r.delta_v for r in cell])) if n else float("nan"),
                    paper_masked=(v, t, p) == PAPER_MASKED_CELL,
                ))
    return rows


def write_heatmap_csv(path, rows: list[dict], meta: str | None = None) -> None:
    with open(path, "w") as fh:
        if meta:
            fh.write(f"# {meta}\n")
        fh.write("v_bin,theta_bin,psi_bin,n,dp,dpsi,dv\n")
        for r in rows:
            fh.write(f"{r['v_bin']},{r['theta_bin']},{r['psi_bin']},{r['n']},"
                     f"{r['dp']:.17g},{r['dpsi']:.17g},{r['dv']:.17g}\n")
        fh.write("# note: the (high,low,high) (V,Theta,Psi) cell is withheld "
                 "in field data for safety; it is populated here\n")


def domain_shift_report(model_reports: dict[str, Sequence[ErrorReport]],
                        eval_set: Sequence[DataSequence],
                        spec: BinSpec = BinSpec(), dt: float = 0.1) -> list[dict]:
    """Mean errors per velocity group for each model, on the shared eval set."""
    attrs = [spec.classify(*sequence_attributes(s, dt))[0] for s in eval_set]
    rows = []
    for name, reports in model_reports.items():
        for g in GROUPS:
            sel = [r for r, a in zip(reports, attrs)
                   if a == g and np.isfinite(r.delta_p)]
            n = len(sel)
            rows.append(dict(
                model=name, v_bin=g, n=n,
                dp=float(np.mean([r.delta_p for r in sel])) if n else float("nan"),
                dpsi=float(np.mean([r.delta_psi for r in sel])) if n else float("nan"),
                dv=float(np.mean([r.delta_v for r in sel])) if n else float("nan"),
            ))
    return rows


def write_domain_shift_csv(path, rows: list[dict], meta: str | None = None) -> None:
    with open(path, "w") as fh:
        if meta:
            fh.write(f"# {meta}\n")
        fh.write("model,v_bin,n,dp,dpsi,dv\n")
        for r in rows:
            fh.write(f"{r['model']},{r['v_bin']},{r['n']},"
                     f"{r['dp']:.17g},{r['dpsi']:.17g},{r['dv']:.17g}\n")


# ---------------------------------------------------------------------------
# figure-8 navigation


@dataclasses.dataclass
class TrialResult:
    success: bool
    mean_speed: float
    sim_time: float
    reached: int
    trace: np.ndarray  # (ticks, 9): tick,x,y,psi,v,throttle,steer,min_cost,active


@dataclasses.dataclass
class Figure8Result:
    successes: int
    trials: int
    mean_speed: float  # mean over successful trials, cruise phase only
    per_trial: list[TrialResult]


def run_figure8_trial(dyn_model, plan: WaypointPlan, terrain: Terrain,
                      sim_params: SimParams, cfg: MppiConfig, seed: int,
                      time_budget: float = 120.0) -> TrialResult:
    """Drive the truth simulator with the controller until the plan is done
    or the budget runs out. Mean speed covers the cruise phase only (between
    reaching the first and the second-to-last goal)."""
    controller = MppiController(cfg, dyn_model, plan, seed=seed)
    p0 = plan.points[0]
    p1 = plan.points[1]
    yaw0 = float(np.arctan2(p1[1] - p0[1], p1[0] - p0[0]))
    s = initial_sim_state(float(p0[0]), float(p0[1]), yaw0, 0.0, terrain, sim_params)
    max_ticks = int(round(time_budget / sim_params.dt))
    reach_tick: dict[int, int] = {}
    rows = []
    for tick in range(max_ticks):
        controller.observe_position(s.x, s.y)
        while controller.active_index > len(reach_tick):
            reach_tick[len(reach_tick)] = tick
        if controller.done:
            break
        full = to_full_state(s, terrain)
        obs = crop_observation(terrain, full)
        action = controller.step(full, obs)
        rows.append([tick, s.x, s.y, s.yaw, s.u, action.throttle,
                     action.delta_target, controller.last_info.get("min_cost", np.nan),
                     controller.active_index])
        try:
            s = sim_step(s, action.as_array(), terrain, sim_params)
        except Exception:
            break
    success = controller.done
    trace = np.array(rows) if rows else np.zeros((0, 9))
    mean_speed = float("nan")
    if success and 1 in reach_tick and (plan.n - 2) in reach_tick:
        t_lo, t_hi = reach_tick[1], reach_tick[plan.n - 2]
        if t_hi > t_lo:
            mean_speed = float(np.mean(np.abs(trace[t_lo:t_hi, 4])))
    return TrialResult(success=success, mean_speed=mean_speed,
                       sim_time=len(rows) * sim_params.dt,
                       reached=controller.active_index, trace=trace)


def figure8_experiment(dyn_model, goal_radius: float, trials: int,
                       terrain: Terrain, sim_params: SimParams, cfg: MppiConfig,
                       time_budget: float = 120.0,
                       trial_seeds: Sequence[int] | None = None) -> Figure8Result:
    center = (terrain.extent / 2.0, terrain.extent / 2.0 - 10.0)
    plan = figure_eight_plan(goal_radius, center=center)
    results = []
    seeds = list(trial_seeds) if trial_seeds is not None else list(range(trials))
    for k in range(trials):
        results.append(run_figure8_trial(dyn_model, plan, terrain, sim_params,
                                         cfg, seed=seeds[k], time_budget=time_budget))
    succ = [r for r in results if r.success]
    speeds = [r.mean_speed for r in succ if np.isfinite(r.mean_speed)]
    return Figure8Result(successes=len(succ), trials=trials,
                         mean_speed=float(np.mean(speeds)) if speeds else float("nan"),
                         per_trial=results)


def write_trace_csv(path, trace: np.ndarray, meta: str | None = None) -> None:
    with open(path, "w") as fh:
        if meta:
            fh.write(f"# {meta}\n")
        fh.write("tick,x,y,psi,v,chosen_throttle,chosen_steer,min_cost,active_waypoint\n")
        for row in trace:
            fh.write(f"{int(row[0])}," + ",".join(f"{x:.17g}" for x in row[1:7])
                     + f",{row[7]:.17g},{int(row[8])}\n")


def figure8_summary_json(path, results: dict[str, dict[float, Figure8Result]],
                         meta: dict | None = None) -> None:
    out = {"meta": meta or {}}
    for model_name, by_radius in results.items():
        out[model_name] = {
            str(radius): {
                "successes": r.successes,
                "trials": r.trials,
                "mean_speed": None if not np.isfinite(r.mean_speed) else r.mean_speed,
                "per_trial": [
                    {"success": t.success,
                     "mean_speed": None if not np.isfinite(t.mean_speed) else t.mean_speed,
                     "sim_time": t.sim_time, "reached": t.reached}
                    for t in r.per_trial
                ],
            }
            for radius, r in by_radius.items()
        }
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# rollout micro-benchmark


def benchmark_rollout(params: nn_mod.ModelParams, kbm_params: KbmParams,
                      terrain: Terrain, sim_params: SimParams,
                      sample_counts: Sequence[int] = (1024, 2048, 4096),
                      reps: int = 20, horizon: int = 50, seed: int = 0) -> list[dict]:
    """Median wall times of the naive per-sample path, the shared-encoding
    path, and the bicycle model, per sample count."""
    rng = np.random.default_rng(np.random.SeedSequence([4242, seed]))
    c = terrain.extent / 2.0
    s0 = initial_sim_state(c, c, 0.3, 2.0, terrain, sim_params)
    full = to_full_state(s0, terrain)
    obs = crop_observation(terrain, full)
    kbm_model = mppi_mod.KbmMppiModel(kbm_params)
    rows = []
    for n in sample_counts:
        actions = np.clip(
            rng.standard_normal((n, horizon, 2)) * np.array([0.2, 0.1])
            + np.array([0.5, 0.0]),
            [0.0, -0.5], [1.0, 0.5])
        # warm-up
        mppi_mod.rollout_batch_shared(params, full.as_array(), obs, actions[:8])
        kbm_model.rollout_states(full, obs, actions[:8])
        t_naive, t_shared, t_kbm = [], [], []
        for _ in range(reps):
            t0 = time.perf_counter()
            mppi_mod.rollout_batch_naive(params, full.as_array(), obs, actions)
            t1 = time.perf_counter()
            mppi_mod.rollout_batch_shared(params, full.as_array(), obs, actions)
            t2 = time.perf_counter()
            kbm_model.rollout_states(full, obs, actions)
            t3 = time.perf_counter()
            t_naive.append(t1 - t0)
            t_shared.append(t2 - t1)
            t_kbm.append(t3 - t2)
        rows.append(dict(n_samples=int(n),
                         t_naive=float(np.median(t_naive)),
                         t_shared=float(np.median(t_shared)),
                         t_kbm=float(np.median(t_kbm)),
                         speedup=float(np.median(t_naive) / np.median(t_shared))))
    return rows


def write_benchmark_csv(path, rows: list[dict], meta: str | None = None) -> None:
    with open(path, "w") as fh:
        if meta:
            fh.write(f"# {meta}\n")
        fh.write("n_samples,t_naive,t_shared,t_kbm,speedup\n")
        for r in rows:
            fh.write(f"{r['n_samples']},{r['t_naive']:.6g},{r['t_shared']:.6g},"
                     f"{r['t_kbm']:.6g},{r['speedup']:.6g}\n")
