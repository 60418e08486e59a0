"""Cross-evaluation, forgetting factors and adversary explainability.

All evaluations use the FDI^D episode protocol with the detector queried
but never updated. Every cell of a cross matrix is seeded from the
adversary column only, so the detectors in one column face exactly the
same attack episodes and the result is independent of evaluation order.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .env import NO_ATTACK, NullDetector, Scenario, read_episode_log
from .errors import EmptyMatrixError, IncompatibleCheckpointError, InvalidInputError

log = logging.getLogger(__name__)

DROOP_CATEGORIES = ("-1", "0", "+1", "muted")


@dataclass
class PairResult:
    detector: str
    adversary: str
    accuracy: float
    freq_reward: float
    episodes: int
    seed: int
    correct: int = 0
    windows: int = 0


def _check_dims(scenario: Scenario, adversary, detector) -> None:
    det_agent = getattr(detector, "agent", None)
    if det_agent is not None and det_agent.policy.spec.n_inputs != scenario.extractor.size:
        raise IncompatibleCheckpointError(
            f"detector {det_agent.name} expects {det_agent.policy.spec.n_inputs} inputs, "
            f"features have {scenario.extractor.size}")
    adv_agent = getattr(adversary, "agent", None)
    if adv_agent is not None and adv_agent.policy.spec.n_inputs != 2 * scenario.model.n + 1:
        raise IncompatibleCheckpointError(
            f"adversary {adv_agent.name} expects {adv_agent.policy.spec.n_inputs} inputs, "
            f"observations have {2 * scenario.model.n + 1}")


def evaluate_pair(scenario: Scenario, adversary, detector, episodes: int, seed: int,
                  batch: int = 100, log_dir=None, log_episodes: int = 0) -> PairResult:
    """Detection accuracy over all windows and mean unscaled frequency reward.

    With ``log_dir`` the first ``log_episodes`` episodes are written as
    episode logs (CSV + manifest).
    """
    if episodes < 1:
        raise InvalidInputError("need at least one evaluation episode")
    _check_dims(scenario, adversary, detector)
    env = scenario.defender_env([adversary])
    horizon = scenario.config.horizon
    rng = np.random.default_rng(seed)
    correct = windows = 0
    freq = []
    done_eps = 0
    adv_name = getattr(adversary, "name", "")
    det_name = getattr(detector, "name", "")
    while done_eps < episodes:
        size = min(batch, episodes - done_eps)
        obs = env.reset(size, rng)
        done = False
        while not done:
            truth = env.ground_truth
            decision = np.asarray(detector.decide(obs, truth), dtype=np.int64)
            correct += int(np.sum(decision == truth))
            windows += size
            obs, _, done, _ = env.step(decision)
        freq.extend(env.core.frequency_excess(0, horizon).sum(axis=1).tolist())
        if log_dir is not None:
            for b in range(min(size, log_episodes - done_eps)):
                ep = done_eps + b
                entry = env.episode_log(b, opponent=det_name, role=adv_name)
                entry.seeds = {"evaluation_seed": seed, "episode": ep}
                entry.hashes = _hashes(adversary, detector)
                stem = Path(log_dir) / f"episode_{ep:04d}"
                entry.write(stem.with_suffix(".csv"), stem.with_suffix(".json"))
        done_eps += size
    return PairResult(det_name, adv_name, correct / windows, float(np.mean(freq)), episodes, seed,
                      correct, windows)


def _hashes(*agents) -> dict:
    out = {}
    for obj in agents:
        agent = getattr(obj, "agent", None)
        if agent is not None:
            out[agent.name] = agent.policy_hash
    return out


def accuracy_from_logs(paths: Sequence, period: int) -> float:
    """Recount detection accuracy from persisted episode logs."""
    correct = total = 0
    for path in paths:
        cols = read_episode_log(path)
        for s in np.flatnonzero(cols["detector_decision"] >= 0):
            attacked = cols["attacked_bus"][s - period + 1:s + 1]
            attacked = attacked[attacked != NO_ATTACK]
            truth = int(attacked[0]) if attacked.size else NO_ATTACK
            correct += int(cols["detector_decision"][s] == truth)
            total += 1
    if total == 0:
        raise InvalidInputError("logs contain no detection decisions")
    return correct / total


# --- cross matrix ------------------------------------------------------------


@dataclass
class CrossEvalMatrix:
    detectors: list
    adversaries: list
    accuracy: np.ndarray
    freq_reward: np.ndarray
    episodes: int
    seeds: list

    def cell(self, detector: str, adversary: str):
        i = self.detectors.index(detector)
        j = self.adversaries.index(adversary)
        return float(self.accuracy[i, j]), float(self.freq_reward[i, j])

    def rows(self):
        for i, d in enumerate(self.detectors):
            for j, a in enumerate(self.adversaries):
                yield d, a, float(self.accuracy[i, j]), float(self.freq_reward[i, j]), self.episodes, self.seeds[j]

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["detector", "adversary", "accuracy", "freq_reward", "episodes", "seed"])
            for d, a, acc, fr, eps, seed in self.rows():
                writer.writerow([d, a, repr(acc), repr(fr), eps, seed])

    @classmethod
    def read_csv(cls, path) -> "CrossEvalMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        dets = list(dict.fromkeys(r["detector"] for r in rows))
        advs = list(dict.fromkeys(r["adversary"] for r in rows))
        acc = np.full((len(dets), len(advs)), np.nan)
        fr = np.full_like(acc, np.nan)
        seeds = [0] * len(advs)
        for r in rows:
            i, j = dets.index(r["detector"]), advs.index(r["adversary"])
            acc[i, j] = float(r["accuracy"])
            fr[i, j] = float(r["freq_reward"])
            seeds[j] = int(r["seed"])
        return cls(dets, advs, acc, fr, int(rows[0]["episodes"]) if rows else 0, seeds)


def _pair_job(args):
    scenario, adversary, detector, episodes, seed, batch = args
    return evaluate_pair(scenario, adversary, detector, episodes, seed, batch)


def build_cross_matrix(scenario: Scenario, detectors: dict, adversaries: dict, episodes: int,
                       seeds: Sequence[int], batch: int = 100, workers: int = 1) -> CrossEvalMatrix:
    """Evaluate every (detector, adversary) pair.

    ``detectors`` and ``adversaries`` map display names to opponent objects,
    in row/column order; ``seeds`` has one entry per adversary.
    """
    d_names, a_names = list(detectors), list(adversaries)
    if len(seeds) != len(a_names):
        raise InvalidInputError("one evaluation seed per adversary is required")
    jobs = [(scenario, adversaries[a], detectors[d], episodes, int(seeds[j]), batch)
            for d in d_names for j, a in enumerate(a_names)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_pair_job, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_pair_job(job))
            log.info("evaluated %s vs %s: accuracy %.3f, freq %.2f", job[2].name, job[1].name,
                     results[-1].accuracy, results[-1].freq_reward)
    acc = np.array([r.accuracy for r in results]).reshape(len(d_names), len(a_names))
    fr = np.array([r.freq_reward for r in results]).reshape(len(d_names), len(a_names))
    return CrossEvalMatrix(d_names, a_names, acc, fr, episodes, [int(s) for s in seeds])


# --- forgetting --------------------------------------------------------------


@dataclass
class LagFactor:
    lag: int
    factor: float
    pairs_used: int
    infinite: bool = False


@dataclass
class ForgettingReport:
    lags: list = field(default_factory=list)

    def factor(self, lag: int) -> float:
        for entry in self.lags:
            if entry.lag == lag:
                return entry.factor
        raise KeyError(lag)

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["lag", "factor", "pairs_used"])
            for entry in self.lags:
                writer.writerow([entry.lag, repr(entry.factor), entry.pairs_used])


def backward_transfer(accuracy: np.ndarray) -> ForgettingReport:
    """Lag-g factors from a square accuracy matrix ``acc[n, m]`` = D_n on A_m.

    The diagonal holds each detector's accuracy on the adversary it was
    trained against (D_0 with A_0).
    """
    acc = np.asarray(accuracy, dtype=np.float64)
    if acc.ndim != 2 or acc.shape[0] != acc.shape[1]:
        raise InvalidInputError("backward transfer needs a square D_0..D_N x A_0..A_N matrix")
    size = acc.shape[0]
    report = ForgettingReport()
    for lag in range(1, size):
        ratios = []
        infinite = False
        for n in range(lag, size):
            m = n - lag
            if acc[n, m] == 0.0:
                ratios.append(math.inf)
                infinite = True
            else:
                ratios.append(acc[m, m] / acc[n, m])
        report.lags.append(LagFactor(lag, float(np.mean(ratios)), len(ratios), infinite))
    return report


# --- explainability ----------------------------------------------------------


@dataclass
class WindowDecisions:
    """Per-episode window decisions of one adversary, shape (episodes, windows)."""

    bus: np.ndarray
    altered_k: np.ndarray
    mute: np.ndarray


def collect_window_decisions(scenario: Scenario, adversary, episodes: int, seed: int,
                             batch: int = 100) -> WindowDecisions:
    env = scenario.defender_env([adversary])
    null = NullDetector()
    rng = np.random.default_rng(seed)
    parts = []
    done_eps = 0
    while done_eps < episodes:
        size = min(batch, episodes - done_eps)
        obs = env.reset(size, rng)
        done = False
        while not done:
            obs, _, done, _ = env.step(null.decide(obs))
        wd = env.window_decisions
        parts.append((wd["bus"].copy(), wd["k"].copy(), wd["mute"].copy()))
        done_eps += size
    return WindowDecisions(*(np.concatenate(p) for p in zip(*parts)))


@dataclass
class TransitionMatrix:
    matrix: np.ndarray
    counts: np.ndarray

    @property
    def observed(self) -> np.ndarray:
        """Rows with at least one outgoing transition."""
        return self.counts.sum(axis=1) > 0


def transition_matrix_from_decisions(decisions: WindowDecisions, n: int) -> TransitionMatrix:
    """Bus-to-bus transition frequencies between consecutive non-muted windows."""
    counts = np.zeros((n, n))
    for bus, mute in zip(decisions.bus, decisions.mute):
        seq = bus[~mute]
        if seq.size > 1:
            np.add.at(counts, (seq[:-1] - 1, seq[1:] - 1), 1.0)
    if counts.sum() == 0:
        attacked = int((~decisions.mute).sum())
        raise EmptyMatrixError(
            f"no bus-to-bus transitions observed ({attacked} attacked windows over "
            f"{decisions.mute.shape[0]} episodes)")
    totals = counts.sum(axis=1, keepdims=True)
    matrix = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    return TransitionMatrix(matrix, counts)


def estimate_transition_matrix(scenario: Scenario, adversary, episodes: int, seed: int,
                               batch: int = 100) -> TransitionMatrix:
    decisions = collect_window_decisions(scenario, adversary, episodes, seed, batch)
    return transition_matrix_from_decisions(decisions, scenario.model.n)


def epsilon_distance(t_k, t_l) -> float:
    """Frobenius distance normalized by the geometric mean of the norms."""
    t_k = np.asarray(t_k, dtype=np.float64)
    t_l = np.asarray(t_l, dtype=np.float64)
    if t_k.shape != t_l.shape:
        raise InvalidInputError("transition matrices differ in shape")
    nk = np.linalg.norm(t_k)
    nl = np.linalg.norm(t_l)
    if nk == 0.0 or nl == 0.0:
        raise InvalidInputError("epsilon distance is undefined for a zero matrix")
    return float(np.linalg.norm(t_k - t_l) / math.sqrt(nk * nl))


def epsilon_matrix(matrices: Sequence) -> np.ndarray:
    size = len(matrices)
    out = np.zeros((size, size))
    for i in range(size):
        for j in range(i + 1, size):
            out[i, j] = out[j, i] = epsilon_distance(matrices[i], matrices[j])
    return out


def droop_histogram_from_decisions(decisions: WindowDecisions) -> dict:
    counts = dict.fromkeys(DROOP_CATEGORIES, 0)
    counts["muted"] = int(decisions.mute.sum())
    active = ~decisions.mute
    for label, value in (("-1", -1.0), ("0", 0.0), ("+1", 1.0)):
        counts[label] = int(np.sum(active & (decisions.altered_k == value)))
    return counts


def droop_decision_histogram(scenario: Scenario, adversary, episodes: int, seed: int,
                             batch: int = 100) -> dict:
    """Window tallies over {-1, 0, +1, muted}."""
    return droop_histogram_from_decisions(collect_window_decisions(scenario, adversary, episodes, seed, batch))


# --- report files ------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def _lerp_color(t: float) -> str:
    lo, hi = (247, 251, 255), (8, 48, 107)
    rgb = [round(a + (b - a) * t) for a, b in zip(lo, hi)]
    return "#%02x%02x%02x" % tuple(rgb)


def heatmap_svg(values: np.ndarray, labels: Sequence[str], title: str) -> str:
    values = np.asarray(values, dtype=np.float64)
    size = len(labels)
    cell, left, top = 56, 90, 50
    vmax = float(np.nanmax(values)) if values.size else 0.0
    width = left + cell * size + 20
    height = top + cell * size + 40
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f"<metadata>color scale: linear from 0 to {_fmt(vmax)}</metadata>",
        f'<text x="{left}" y="20" font-size="14">{title}</text>',
    ]
    for i in range(size):
        out.append(f'<text x="{left - 6}" y="{top + cell * i + cell // 2 + 4}" text-anchor="end">{labels[i]}</text>')
        out.append(f'<text x="{left + cell * i + cell // 2}" y="{top - 6}" text-anchor="middle">{labels[i]}</text>')
        for j in range(size):
            v = values[i, j]
            t = 0.0 if vmax <= 0 or not np.isfinite(v) else min(max(v / vmax, 0.0), 1.0)
            text_color = "#ffffff" if t > 0.55 else "#000000"
            x, y = left + cell * j, top + cell * i
            out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{_lerp_color(t)}" stroke="#ffffff"/>')
            out.append(f'<text x="{x + cell // 2}" y="{y + cell // 2 + 4}" text-anchor="middle" '
                       f'fill="{text_color}">{_fmt(v) if np.isfinite(v) else "n/a"}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def histogram_svg(histograms: dict, title: str) -> str:
    names = list(histograms)
    colors = ("#c0392b", "#e67e22", "#27ae60", "#7f8c8d")
    group, bar, left, top, plot_h = 120, 24, 50, 40, 200
    width = left + group * max(len(names), 1) + 20
    height = top + plot_h + 70
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<text x="{left}" y="20" font-size="14">{title}</text>',
        f'<line x1="{left}" y1="{top + plot_h}" x2="{width - 10}" y2="{top + plot_h}" stroke="#000000"/>',
    ]
    for g, name in enumerate(names):
        counts = histograms[name]
        total = sum(counts.values()) or 1
        x0 = left + group * g + 10
        for c, cat in enumerate(DROOP_CATEGORIES):
            frac = counts[cat] / total
            h = round(plot_h * frac, 2)
            out.append(f'<rect x="{x0 + bar * c}" y="{round(top + plot_h - h, 2)}" width="{bar - 2}" '
                       f'height="{h}" fill="{colors[c]}"><title>{name} {cat}: {counts[cat]}</title></rect>')
        out.append(f'<text x="{x0 + 2 * bar}" y="{top + plot_h + 16}" text-anchor="middle">{name}</text>')
    for c, cat in enumerate(DROOP_CATEGORIES):
        x = left + 80 * c
        out.append(f'<rect x="{x}" y="{top + plot_h + 34}" width="10" height="10" fill="{colors[c]}"/>')
        out.append(f'<text x="{x + 14}" y="{top + plot_h + 43}">{"k&#8242;=" + cat if cat != "muted" else "muted"}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_reports(output_dir, matrix: Optional[CrossEvalMatrix] = None,
                 forgetting: Optional[ForgettingReport] = None,
                 distances: Optional[tuple] = None, histograms: Optional[dict] = None) -> list:
    """Write whichever report files have inputs; returns the written paths.

    ``distances`` is ``(names, epsilon matrix)``; ``histograms`` maps an
    adversary name to its droop tallies.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if matrix is not None:
        matrix.write_csv(out / "cross_eval.csv")
        written.append(out / "cross_eval.csv")
    if forgetting is not None:
        forgetting.write_csv(out / "forgetting.csv")
        written.append(out / "forgetting.csv")
    if distances is not None:
        names, eps = distances
        with open(out / "epsilon.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["adversary"] + list(names))
            for name, row in zip(names, eps):
                writer.writerow([name] + [repr(float(v)) for v in row])
        (out / "epsilon_heatmap.svg").write_text(heatmap_svg(eps, names, "Transition-matrix distance"))
        written += [out / "epsilon.csv", out / "epsilon_heatmap.svg"]
    if histograms is not None:
        with open(out / "droop_hist.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["adversary"] + list(DROOP_CATEGORIES) + ["windows"])
            for name, counts in histograms.items():
                writer.writerow([name] + [counts[c] for c in DROOP_CATEGORIES] + [sum(counts.values())])
        (out / "droop_hist.svg").write_text(histogram_svg(histograms, "Droop modification per window"))
        written += [out / "droop_hist.csv", out / "droop_hist.svg"]
    return written
