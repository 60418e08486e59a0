"""Offline detector bootstrap, CARL iterations, rehearsal training, experiment runs."""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import evaluation as ev
from . import kernels
from .agents import (ADVERSARY, DETECTOR, Agent, PolicyAdversary, PolicyDetector, adversary_spec,
                     detector_spec, warm_start)
from .env import ATTACK_FRACTIONS, EpisodeConfig, NullDetector, Scenario, SyntheticAdversary
from .errors import ConfigError, DatasetError, InvalidInputError, LibraryStateError
from .grid import GridState, default_grid_path, load_grid
from .nn import MLP, Adam, Categorical, dumps_json, write_atomic
from .ppo import PpoConfig, train_ppo, write_curve
from .predictor import (FeatureExtractor, PredictorConfig, PredictorModel, reference_dataset, train_predictor,
                        write_dataset)

log = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = Path(__file__).parent / "data" / "default_config.json"
SMOKE_CONFIG_PATH = Path(__file__).parent / "data" / "smoke_config.json"

# Independent random streams: every stage draws from its own generator keyed
# by (master seed, stream code, index), so evaluation never shares a stream
# with training and a resumed run replays exactly.
STREAMS = {
    "predictor-data": 1, "predictor": 2, "offline-train": 3, "offline-holdout": 4,
    "carl-adversary": 5, "carl-detector": 6, "rcarl-detector": 7, "rcarl-adversary": 8,
    "stamp": 9, "evaluation": 10, "explain": 11, "init": 12,
}


def stream_rng(master: int, stream: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(master), STREAMS[stream], int(index)])


def stream_seed(master: int, stream: str, index: int = 0) -> int:
    """A plain integer seed for the stream (recorded in evaluation CSVs)."""
    return int(np.random.SeedSequence([int(master), STREAMS[stream], int(index)]).generate_state(1)[0])


# --- sampling distributions --------------------------------------------------


def rehearsal_distribution(n_adversaries: int, anchor: float = 0.8) -> np.ndarray:
    """(A_0, A_1..A_N) probabilities for training the rehearsal detector."""
    if n_adversaries < 1:
        raise LibraryStateError("rehearsal needs at least one RL adversary")
    if not 0.0 <= anchor <= 1.0:
        raise InvalidInputError("anchor probability must lie in [0, 1]")
    return np.array([anchor] + [(1.0 - anchor) / n_adversaries] * n_adversaries)


def uniform_distribution(count: int) -> np.ndarray:
    if count < 1:
        raise LibraryStateError("no detectors to sample from")
    return np.full(count, 1.0 / count)


def sample_opponents(rng: np.random.Generator, probs, size: int) -> np.ndarray:
    """Opponent indices per episode (the same draw the environments perform)."""
    return rng.choice(len(probs), size=size, p=probs)


# --- offline detector --------------------------------------------------------


@dataclass
class OfflineConfig:
    train_episodes: int = 1000
    holdout_episodes: int = 200
    epochs: int = 6
    batch_size: int = 256
    learning_rate: float = 1e-3
    hidden: tuple = (256, 256)
    batch: int = 100

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.train_episodes < 1 or self.holdout_episodes < 1 or self.epochs < 1 or self.batch_size < 1:
            raise InvalidInputError("offline training sizes must be positive")


def synthetic_windows(scenario: Scenario, adversary, episodes: int, rng, batch: int = 100):
    """Detector features and window labels from unrewarded episodes."""
    env = scenario.defender_env([adversary])
    null = NullDetector()
    feats, labels = [], []
    done_eps = 0
    while done_eps < episodes:
        size = min(batch, episodes - done_eps)
        obs = env.reset(size, rng)
        done = False
        while not done:
            feats.append(obs)
            labels.append(env.ground_truth.copy())
            obs, _, done, _ = env.step(null.decide(obs))
        done_eps += size
    return np.concatenate(feats), np.concatenate(labels)


def train_offline_detector(scenario: Scenario, config: OfflineConfig, rng_train, rng_holdout,
                           adversary=None, require_all_classes: bool = True, name: str = "D0"):
    """Supervised cross-entropy training of D_0 on synthetic attack windows.

    Returns (agent, report). The network has the RL detector's shape so it
    can warm-start PPO detectors directly.
    """
    n = scenario.model.n
    adversary = adversary or SyntheticAdversary(n)
    x_train, y_train = synthetic_windows(scenario, adversary, config.train_episodes, rng_train, config.batch)
    counts = np.bincount(y_train, minlength=n + 1)
    missing = [int(c) for c in np.flatnonzero(counts == 0)]
    if require_all_classes and missing:
        raise DatasetError(f"synthetic dataset lacks classes {missing}")
    if np.count_nonzero(counts) < 2:
        raise DatasetError("synthetic dataset contains a single class")
    x_hold, y_hold = synthetic_windows(scenario, adversary, config.holdout_episodes, rng_holdout, config.batch)

    shift = x_train.mean(axis=0)
    scale = x_train.std(axis=0)
    scale[scale < 1e-12] = 1.0
    policy = MLP.init(detector_spec(n, scenario.config.detection_period, config.hidden), rng_train)
    agent = Agent(name, DETECTOR, policy, None, shift, scale)
    opt = Adam(policy, config.learning_rate)
    xn = agent.normalize(x_train)
    losses = []
    for _ in range(config.epochs):
        perm = rng_train.permutation(y_train.size)
        epoch_loss = 0.0
        for start in range(0, perm.size, config.batch_size):
            idx = perm[start:start + config.batch_size]
            logits, cache = policy.forward(xn[idx], keep_cache=True)
            dist = Categorical(logits)
            epoch_loss -= float(dist.log_prob(y_train[idx]).sum())
            grad = dist.probs.copy()
            grad[np.arange(idx.size), y_train[idx]] -= 1.0
            g, _ = policy.backward(cache, grad / idx.size)
            opt.step(g)
        losses.append(epoch_loss / perm.size)
    report = {
        "train_windows": int(y_train.size),
        "holdout_windows": int(y_hold.size),
        "class_counts": counts.tolist(),
        "epoch_losses": losses,
        "train_accuracy": float(np.mean(agent.greedy(x_train)[:, 0] == y_train)),
        "holdout_accuracy": float(np.mean(agent.greedy(x_hold)[:, 0] == y_hold)),
    }
    agent.lineage.append({"stage": "offline", "train_episodes": config.train_episodes,
                          "predictor_hash": scenario.extractor.predictor.content_hash()})
    return agent, report


# --- agent library -----------------------------------------------------------


def synthetic_spec(n: int) -> dict:
    return {"generator": "synthetic", "n": n, "fractions": list(ATTACK_FRACTIONS),
            "altered_values": [-1.0, 0.0, 1.0]}


def _spec_hash(spec: dict) -> str:
    return hashlib.sha1(dumps_json(spec).encode()).hexdigest()


class AgentLibrary:
    """Append-only store of detectors D_0..D_N, adversaries A_0..A_N and the
    rehearsal-trained pair; one directory per agent plus ``library.json``.
    """

    INDEX = "library.json"

    def __init__(self, root, n: int):
        self.root = Path(root)
        spec = synthetic_spec(n)
        self.detectors: list = []
        self.adversaries: list = [{"name": "A0", "synthetic": spec, "policy_hash": _spec_hash(spec),
                                   "lineage": [], "stamps": {}}]
        self.rehearsal: dict = {}
        self._cache: dict = {}

    @classmethod
    def open(cls, root, n: int) -> "AgentLibrary":
        lib = cls(root, n)
        index = lib.root / cls.INDEX
        if index.exists():
            data = json.loads(index.read_text())
            lib.detectors = data["detectors"]
            lib.adversaries = data["adversaries"]
            lib.rehearsal = data.get("rehearsal", {})
        return lib

    def save(self) -> None:
        data = {"detectors": self.detectors, "adversaries": self.adversaries, "rehearsal": self.rehearsal}
        write_atomic(self.root / self.INDEX, dumps_json(data))

    # entries

    def entries(self):
        return self.detectors + self.adversaries + list(self.rehearsal.values())

    def names(self):
        return [e["name"] for e in self.entries()]

    def entry(self, name: str) -> dict:
        for e in self.entries():
            if e["name"] == name:
                return e
        raise LibraryStateError(f"library has no agent {name!r}")

    def has(self, name: str) -> bool:
        return name in self.names()

    @property
    def detector_names(self):
        return [e["name"] for e in self.detectors]

    @property
    def adversary_names(self):
        return [e["name"] for e in self.adversaries]

    @property
    def n_rl_adversaries(self) -> int:
        return len(self.adversaries) - 1

    def add(self, agent: Agent, role: str, optimizers=None, seed=None, curve=None, stamps=None,
            extra_files: Optional[dict] = None) -> dict:
        if self.has(agent.name):
            raise LibraryStateError(f"agent {agent.name!r} already in the library")
        directory = self.root / agent.name
        agent.save(directory, optimizers, seed)
        if curve is not None:
            write_curve(curve, directory / "curve.csv")
        for fname, payload in (extra_files or {}).items():
            write_atomic(directory / fname, dumps_json(payload))
        entry = {"name": agent.name, "kind": agent.kind, "path": agent.name, "policy_hash": agent.policy_hash,
                 "lineage": agent.lineage, "stamps": stamps or {}}
        if role == "detector":
            self.detectors.append(entry)
        elif role == "adversary":
            self.adversaries.append(entry)
        elif role in ("rehearsal-detector", "rehearsal-adversary"):
            self.rehearsal[role.split("-")[1]] = entry
        else:
            raise InvalidInputError(f"unknown library role {role!r}")
        self._cache[agent.name] = agent
        self.save()
        return entry

    def agent(self, name: str) -> Agent:
        if name not in self._cache:
            entry = self.entry(name)
            if "synthetic" in entry:
                raise LibraryStateError(f"{name} is a synthetic generator, not a checkpoint")
            self._cache[name] = Agent.load(self.root / entry["path"])
        return self._cache[name]

    def adversary(self, name: str):
        entry = self.entry(name)
        if "synthetic" in entry:
            spec = entry["synthetic"]
            return SyntheticAdversary(spec["n"], spec["fractions"], spec["altered_values"])
        return PolicyAdversary(self.agent(name))

    def detector(self, name: str) -> PolicyDetector:
        return PolicyDetector(self.agent(name))

    def verify(self) -> None:
        """Checkpoint hashes match the index and every recorded opponent hash."""
        hashes = {}
        for e in self.entries():
            if "synthetic" not in e:
                actual = self.agent(e["name"]).policy_hash
                if actual != e["policy_hash"]:
                    raise LibraryStateError(f"checkpoint of {e['name']} does not match the library index")
            hashes[e["name"]] = e["policy_hash"]
        for e in self.entries():
            for step in e["lineage"]:
                for opp in step.get("trained_against", []):
                    if hashes.get(opp["name"]) != opp["hash"]:
                        raise LibraryStateError(f"{e['name']} records a stale hash for {opp['name']}")


# --- CARL / R-CARL -----------------------------------------------------------


@dataclass
class TrainingPlan:
    """PPO settings shared by the CARL and rehearsal phases."""

    adversary_ppo: PpoConfig
    detector_ppo: PpoConfig
    episodes: int = 2000
    early_stop: bool = True
    adversary_hidden: tuple = (256, 256)
    adversary_output_gain: float = 0.01
    stamp_episodes: int = 100
    eval_batch: int = 100
    master_seed: int = 0


def _progress(label):
    def report(row):
        if row["update"] % 10 == 0:
            log.info("%s: %d episodes, mean reward %.3f, entropy %.3f", label, row["episodes"],
                     row["mean_episode_reward"], row["entropy"])
    return report


def _opponent_record(library: AgentLibrary, names) -> list:
    return [{"name": nm, "hash": library.entry(nm)["policy_hash"]} for nm in names]


def _stamp(scenario, plan, adversary, detector, index) -> dict:
    res = ev.evaluate_pair(scenario, adversary, detector, plan.stamp_episodes,
                           stream_seed(plan.master_seed, "stamp", index), plan.eval_batch)
    return {"detector": res.detector, "adversary": res.adversary, "accuracy": res.accuracy,
            "freq_reward": res.freq_reward, "episodes": res.episodes, "seed": res.seed}


def new_adversary(scenario: Scenario, name: str, plan: TrainingPlan, rng) -> Agent:
    shift, scale = scenario.adversary_obs_stats()
    agent = Agent.create(name, ADVERSARY, adversary_spec(scenario.model.n, plan.adversary_hidden), rng,
                         shift, scale, output_gain=plan.adversary_output_gain)
    agent.lineage.append({"initialized": "random"})
    return agent


def _carl_adversary_phase(library, scenario, n, plan, detector) -> None:
    master = plan.master_seed
    rng = stream_rng(master, "carl-adversary", n)
    if n == 1:
        adv = new_adversary(scenario, "A1", plan, stream_rng(master, "init", n))
    else:
        adv = warm_start(library.agent(f"A{n - 1}"), f"A{n}")
    env = scenario.adversary_env([detector])
    learner, curve = train_ppo(adv, env, plan.adversary_ppo, plan.episodes, rng, plan.early_stop,
                               _progress(f"A{n}"))
    adv.lineage.append({"stage": "carl", "iteration": n, "episodes": curve[-1]["episodes"] if curve else 0,
                        "trained_against": _opponent_record(library, [detector.name])})
    adv.metadata.update(iteration=n, ppo=asdict(plan.adversary_ppo))
    stamps = {"final": _stamp(scenario, plan, PolicyAdversary(adv), detector, 2 * n)}
    library.add(adv, "adversary", learner.optimizers(), master, curve, stamps)


def carl_iteration(library: AgentLibrary, scenario: Scenario, n: int, plan: TrainingPlan):
    """Phase 1 trains A_n against frozen D_{n-1}; phase 2 trains D_n against frozen A_n.

    If A_n is already in the library (an interrupted iteration) phase 1 is
    not repeated.
    """
    prev_det = f"D{n - 1}"
    if n < 1 or not library.has(prev_det):
        raise LibraryStateError(f"iteration {n} needs detector {prev_det}")
    if n > 1 and not library.has(f"A{n - 1}"):
        raise LibraryStateError(f"iteration {n} needs adversary A{n - 1}")
    if library.has(f"D{n}"):
        raise LibraryStateError(f"iteration {n} already present in the library")
    master = plan.master_seed
    if not library.has(f"A{n}"):
        _carl_adversary_phase(library, scenario, n, plan, library.detector(prev_det))

    rng = stream_rng(master, "carl-detector", n)
    det = warm_start(library.agent(prev_det), f"D{n}", rng=stream_rng(master, "init", 100 + n))
    opponent = library.adversary(f"A{n}")
    env = scenario.defender_env([opponent])
    learner, curve = train_ppo(det, env, plan.detector_ppo, plan.episodes, rng, plan.early_stop,
                               _progress(f"D{n}"))
    det.lineage.append({"stage": "carl", "iteration": n, "episodes": curve[-1]["episodes"] if curve else 0,
                        "trained_against": _opponent_record(library, [f"A{n}"])})
    det.metadata.update(iteration=n, ppo=asdict(plan.detector_ppo))
    stamps = {"final": _stamp(scenario, plan, opponent, PolicyDetector(det), 2 * n + 1)}
    library.add(det, "detector", learner.optimizers(), master, curve, stamps)
    return library.agent(f"A{n}"), library.agent(f"D{n}")


def rcarl_train_detector(library: AgentLibrary, scenario: Scenario, plan: TrainingPlan,
                         anchor: float = 0.8, name: str = "D_R") -> Agent:
    """Detector trained against A_0 (prob. ``anchor``) and each A_n (rest, equally)."""
    n_rl = library.n_rl_adversaries
    probs = rehearsal_distribution(n_rl, anchor)
    if not library.has("D0"):
        raise LibraryStateError("rehearsal detector needs D0")
    master = plan.master_seed
    det = warm_start(library.agent("D0"), name, rng=stream_rng(master, "init", 200))
    names = library.adversary_names
    env = scenario.defender_env([library.adversary(a) for a in names], probs)
    learner, curve = train_ppo(det, env, plan.detector_ppo, plan.episodes, stream_rng(master, "rcarl-detector"),
                               plan.early_stop, _progress(name))
    det.lineage.append({"stage": "rcarl", "episodes": curve[-1]["episodes"] if curve else 0,
                        "sampling": dict(zip(names, probs.tolist())),
                        "trained_against": _opponent_record(library, names)})
    det.metadata.update(iteration="rcarl", ppo=asdict(plan.detector_ppo))
    library.add(det, "rehearsal-detector", learner.optimizers(), master, curve)
    return det


def rcarl_train_adversary(library: AgentLibrary, scenario: Scenario, plan: TrainingPlan,
                          name: str = "A_R") -> Agent:
    """Adversary trained against a detector drawn uniformly from D_0..D_N per episode."""
    names = library.detector_names
    probs = uniform_distribution(len(names))
    if len(names) < 2:
        raise LibraryStateError("rehearsal adversary needs at least one CARL iteration")
    master = plan.master_seed
    adv = new_adversary(scenario, name, plan, stream_rng(master, "init", 300))
    env = scenario.adversary_env([library.detector(d) for d in names], probs)
    learner, curve = train_ppo(adv, env, plan.adversary_ppo, plan.episodes, stream_rng(master, "rcarl-adversary"),
                               plan.early_stop, _progress(name))
    adv.lineage.append({"stage": "rcarl", "episodes": curve[-1]["episodes"] if curve else 0,
                        "sampling": dict(zip(names, probs.tolist())),
                        "trained_against": _opponent_record(library, names)})
    adv.metadata.update(iteration="rcarl", ppo=asdict(plan.adversary_ppo))
    library.add(adv, "rehearsal-adversary", learner.optimizers(), master, curve)
    return adv


# --- configuration -----------------------------------------------------------

# Keys that never influence artifacts and so are excluded from the config hash
# and from the stored copy of the config.
_RUNTIME_KEYS = ("output_dir",)


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[key], dict) and not isinstance(value, dict):
            raise ConfigError(f"config key {where!r} must be an object")
        if isinstance(out[key], dict):
            out[key] = _merge(out[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(config: dict, assignment: str) -> None:
    """Apply one ``dotted.key=value`` override in place (value parsed as JSON if possible)."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = config
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    if isinstance(node[parts[-1]], dict):
        raise ConfigError(f"config key {key!r} is an object; set its fields instead")
    node[parts[-1]] = _parse_value(text)


def load_config(path=None, overrides=(), base_path=DEFAULT_CONFIG_PATH) -> dict:
    """Default config, overlaid with ``path`` (may be partial) and ``--set`` overrides."""
    try:
        config = json.loads(Path(base_path).read_text())
        if path is not None:
            config = _merge(config, json.loads(Path(path).read_text()))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {exc.filename}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    for item in overrides:
        apply_override(config, item)
    resolve_config(config)
    return config


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**data)
    except (InvalidInputError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


@dataclass
class ResolvedConfig:
    raw: dict
    episode: EpisodeConfig
    predictor: PredictorConfig
    rollouts: int
    perturbation: float
    export_dataset: bool
    offline: OfflineConfig
    plan: TrainingPlan
    iterations: int
    rcarl_enabled: bool
    rcarl_episodes: int
    anchor: float
    eval_episodes: int
    eval_batch: int
    log_episodes: int
    explain_episodes: int
    seed: int
    grid_file: Path
    initial: GridState


def resolve_config(config: dict) -> ResolvedConfig:
    """Validate a raw config dict and build the typed settings."""
    try:
        seed = config["seed"]
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        episode = _build(EpisodeConfig, dict(config["episode"], seed=seed), "episode")
        pred = dict(config["predictor"])
        rollouts = int(pred.pop("rollouts"))
        perturbation = float(pred.pop("perturbation"))
        export = bool(pred.pop("export_dataset"))
        pred["hidden"] = tuple(pred.get("hidden", ()))
        predictor = _build(PredictorConfig, dict(pred, window=episode.detection_period, seed=seed), "predictor")
        offline = _build(OfflineConfig, config["offline"], "offline")
        adv_cfg = config["adversary"]
        plan = TrainingPlan(
            adversary_ppo=_build(PpoConfig, dict(adv_cfg["ppo"], seed=seed), "adversary.ppo"),
            detector_ppo=_build(PpoConfig, dict(config["detector"]["ppo"], seed=seed), "detector.ppo"),
            episodes=int(config["carl"]["episodes"]),
            early_stop=bool(config["carl"]["early_stop"]),
            adversary_hidden=tuple(adv_cfg["hidden"]),
            adversary_output_gain=float(adv_cfg["output_gain"]),
            stamp_episodes=int(config["evaluation"]["stamp_episodes"]),
            eval_batch=int(config["evaluation"]["batch"]),
            master_seed=seed,
        )
        iterations = int(config["carl"]["iterations"])
        rcarl = config["rcarl"]
        initial = GridState(np.asarray(config["initial_state"]["theta"], dtype=np.float64),
                            np.asarray(config["initial_state"]["omega"], dtype=np.float64), 0.0)
        grid_file = Path(config["grid_file"]) if config.get("grid_file") else default_grid_path()
        resolved = ResolvedConfig(
            raw=config, episode=episode, predictor=predictor, rollouts=rollouts, perturbation=perturbation,
            export_dataset=export, offline=offline, plan=plan, iterations=iterations,
            rcarl_enabled=bool(rcarl["enabled"]),
            rcarl_episodes=int(rcarl["episodes"] if rcarl["episodes"] is not None else plan.episodes),
            anchor=float(rcarl["anchor_probability"]),
            eval_episodes=int(config["evaluation"]["episodes"]), eval_batch=plan.eval_batch,
            log_episodes=int(config["evaluation"]["log_episodes"]),
            explain_episodes=int(config["evaluation"]["explain_episodes"]),
            seed=seed, grid_file=grid_file, initial=initial,
        )
    except KeyError as exc:
        raise ConfigError(f"missing config key {exc.args[0]!r}") from exc
    except (InvalidInputError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    if iterations < 0:
        raise ConfigError("carl.iterations must be non-negative")
    if plan.episodes < 1 or resolved.rcarl_episodes < 1 or resolved.eval_episodes < 1:
        raise ConfigError("episode counts must be positive")
    if not 0.0 <= resolved.anchor <= 1.0:
        raise ConfigError("rcarl.anchor_probability must lie in [0, 1]")
    if resolved.rollouts < 1:
        raise ConfigError("predictor.rollouts must be positive")
    return resolved


def stored_config(config: dict) -> dict:
    return {k: v for k, v in config.items() if k not in _RUNTIME_KEYS}


def config_hash(config: dict) -> str:
    """Hash over everything that shapes artifacts except the iteration count,
    which may grow on resume (the library is append-only)."""
    data = copy.deepcopy(stored_config(config))
    data["carl"].pop("iterations", None)
    return hashlib.sha256(dumps_json(data).encode()).hexdigest()


def _flatten(data, prefix=""):
    out = {}
    for key, value in data.items():
        if isinstance(value, dict):
            out.update(_flatten(value, f"{prefix}{key}."))
        else:
            out[f"{prefix}{key}"] = value
    return out


def config_diff(old: dict, new: dict) -> list:
    a, b = _flatten(old), _flatten(new)
    return [f"{k}: {a.get(k, '<absent>')!r} -> {b.get(k, '<absent>')!r}"
            for k in sorted(set(a) | set(b)) if a.get(k, "<absent>") != b.get(k, "<absent>")]


# --- experiment runner -------------------------------------------------------

TARGETS = ("predictor", "offline", "carl", "rcarl", "evaluate", "explain", "report")
_POST_CARL = ("rcarl", "evaluate", "explain", "report")


def _sha1_file(path: Path) -> str:
    return hashlib.sha1(path.read_bytes()).hexdigest()


class Experiment:
    """A run directory: resolved config, manifest, library and reports.

    Stages are executed in order and recorded in ``manifest.json`` once all
    their files are written, so an interrupted run resumes at the first
    unfinished stage.
    """

    def __init__(self, config: dict, output_dir, workers: int = 1, resume: bool = False):
        self.config = config
        self.cfg = resolve_config(config)
        self.out = Path(output_dir)
        self.workers = max(1, int(workers))
        self.manifest_path = self.out / "manifest.json"
        self.hash = config_hash(config)
        self.manifest = self._load_manifest(resume)
        self._scenario: Optional[Scenario] = None
        self._library: Optional[AgentLibrary] = None

    def _load_manifest(self, resume: bool) -> dict:
        if self.manifest_path.exists():
            if not resume:
                raise ConfigError(f"{self.out} already holds a run; pass --resume or choose another output")
            manifest = json.loads(self.manifest_path.read_text())
            if manifest["config_hash"] != self.hash:
                old = json.loads((self.out / "config.json").read_text())
                new = stored_config(self.config)
                for d in (old, new):
                    d["carl"] = {k: v for k, v in d["carl"].items() if k != "iterations"}
                diff = "; ".join(config_diff(old, new)) or "unknown difference"
                raise ConfigError(f"config differs from the run being resumed: {diff}")
            return manifest
        return {"format": "carl-run/1", "config_hash": self.hash, "seed": self.cfg.seed,
                "kernel_backend": kernels.BACKEND, "streams": STREAMS, "stages": []}

    # helpers

    @property
    def completed(self) -> dict:
        return {s["name"]: s for s in self.manifest["stages"]}

    def stage_names(self, target: str) -> list:
        if target not in TARGETS:
            raise ConfigError(f"unknown stage target {target!r}")
        n = self.cfg.iterations
        order = ["predictor", "offline"] + [f"carl-{i}" for i in range(1, n + 1)]
        if target in ("predictor", "offline"):
            return order[:order.index(target) + 1]
        if target == "carl":
            return order
        if target == "rcarl" and (n < 1 or not self.cfg.rcarl_enabled):
            raise LibraryStateError("rehearsal training needs at least one CARL iteration and rcarl.enabled")
        if self.cfg.rcarl_enabled and n >= 1:
            order.append("rcarl")
        if target == "rcarl":
            return order
        return order + list(TARGETS[TARGETS.index("evaluate"):TARGETS.index(target) + 1])

    def plan(self, target: str) -> list:
        done = self.completed
        return [{"stage": s, "status": "done" if s in done else "pending"} for s in self.stage_names(target)]

    def _check_iterations(self):
        done = self.completed
        n_done = sum(1 for s in done if s.startswith("carl-"))
        for name in _POST_CARL:
            if name in done and done[name].get("iterations") != self.cfg.iterations:
                raise ConfigError(
                    f"stage {name!r} was built on {done[name].get('iterations')} CARL iterations, "
                    f"requested {self.cfg.iterations}")
        if n_done > self.cfg.iterations and any(name in done for name in _POST_CARL):
            raise ConfigError("cannot shrink the number of CARL iterations of an existing run")

    @property
    def scenario(self) -> Scenario:
        if self._scenario is None:
            model = load_grid(self.cfg.grid_file)
            if self.cfg.initial.n != model.n:
                raise ConfigError("initial_state does not match the grid size")
            predictor = PredictorModel.load(self.out / "predictor" / "predictor.json")
            self._scenario = Scenario(model, self.cfg.episode, FeatureExtractor(predictor), self.cfg.initial)
        return self._scenario

    @property
    def library(self) -> AgentLibrary:
        if self._library is None:
            self._library = AgentLibrary.open(self.out / "library", load_grid(self.cfg.grid_file).n)
        return self._library

    def _finish(self, name: str, files, **extra) -> None:
        outputs = {str(Path(f).relative_to(self.out)): _sha1_file(Path(f)) for f in sorted(map(Path, files))}
        self.manifest["stages"] = [s for s in self.manifest["stages"] if s["name"] != name]
        self.manifest["stages"].append(dict({"name": name, "outputs": outputs}, **extra))
        lib_path = self.out / "library" / AgentLibrary.INDEX
        if lib_path.exists():
            self.manifest["agents"] = {e["name"]: e["policy_hash"] for e in self.library.entries()}
        write_atomic(self.manifest_path, dumps_json(self.manifest))

    # stages

    def run(self, target: str) -> list:
        """Execute every pending stage up to ``target``; returns the stages run."""
        names = self.stage_names(target)
        self._check_iterations()
        self.out.mkdir(parents=True, exist_ok=True)
        write_atomic(self.out / "config.json", dumps_json(stored_config(self.config)))
        ran = []
        for name in names:
            if name in self.completed:
                continue
            log.info("stage %s", name)
            if name.startswith("carl-"):
                self._stage_carl(int(name.split("-")[1]))
            else:
                getattr(self, "_stage_" + name)()
            ran.append(name)
        return ran

    def _stage_predictor(self):
        cfg = self.cfg
        model = load_grid(cfg.grid_file)
        data = reference_dataset(model, cfg.initial, cfg.rollouts, cfg.episode.horizon, cfg.episode.dt,
                                 stream_seed(cfg.seed, "predictor-data"), cfg.perturbation)
        predictor = train_predictor(data, cfg.predictor)
        pdir = self.out / "predictor"
        predictor.save(pdir / "predictor.json")
        report = {"holdout_mse": predictor.holdout_mse, "target_variance": predictor.target_variance,
                  "rollouts": cfg.rollouts, "hash": predictor.content_hash()}
        write_atomic(pdir / "report.json", dumps_json(report))
        files = [pdir / "predictor.json", pdir / "report.json"]
        if cfg.export_dataset:
            files.append(write_dataset(data, pdir / "dataset"))
        self._finish("predictor", files)

    def _stage_offline(self):
        cfg = self.cfg
        if self.library.has("D0"):  # interrupted after saving D0
            self._finish("offline", self._agent_files("D0"))
            return
        agent, report = train_offline_detector(self.scenario, cfg.offline, stream_rng(cfg.seed, "offline-train"),
                                               stream_rng(cfg.seed, "offline-holdout"))
        log.info("D0 held-out accuracy %.3f", report["holdout_accuracy"])
        self.library.add(agent, "detector", seed=cfg.seed, stamps={"holdout_accuracy": report["holdout_accuracy"]},
                extra_files={"report.json": report})
        self._finish("offline", self._agent_files("D0"))

    def _agent_files(self, *names):
        files = [self.out / "library" / AgentLibrary.INDEX]
        for nm in names:
            files += sorted((self.out / "library" / nm).glob("*"))
        return files

    def _stage_carl(self, n: int):
        carl_iteration(self.library, self.scenario, n, self.cfg.plan)
        self._finish(f"carl-{n}", self._agent_files(f"A{n}", f"D{n}"))

    def _stage_rcarl(self):
        plan = copy.copy(self.cfg.plan)
        plan.episodes = self.cfg.rcarl_episodes
        lib = self.library
        if not lib.has("D_R"):
            rcarl_train_detector(lib, self.scenario, plan, self.cfg.anchor)
        if not lib.has("A_R"):
            rcarl_train_adversary(lib, self.scenario, plan)
        self._finish("rcarl", self._agent_files("D_R", "A_R"), iterations=self.cfg.iterations)

    def lineup(self):
        lib = self.library
        dets = lib.detector_names + ([lib.rehearsal["detector"]["name"]] if "detector" in lib.rehearsal else [])
        advs = lib.adversary_names + ([lib.rehearsal["adversary"]["name"]] if "adversary" in lib.rehearsal else [])
        return dets, advs

    def _stage_evaluate(self):
        cfg = self.cfg
        lib = self.library
        lib.verify()
        dets, advs = self.lineup()
        seeds = [stream_seed(cfg.seed, "evaluation", j) for j in range(len(advs))]
        matrix = ev.build_cross_matrix(self.scenario, {d: lib.detector(d) for d in dets},
                                       {a: lib.adversary(a) for a in advs}, cfg.eval_episodes, seeds,
                                       cfg.eval_batch, self.workers)
        edir = self.out / "evaluation"
        files = []
        n_carl = len(lib.detector_names)
        forgetting = ev.backward_transfer(matrix.accuracy[:n_carl, :n_carl]) if n_carl > 1 else None
        files += ev.emit_reports(edir, matrix=matrix, forgetting=forgetting)
        if cfg.log_episodes > 0:
            for j, a in enumerate(advs):
                for d in dets:
                    logdir = edir / "episodes" / f"{d}__{a}"
                    ev.evaluate_pair(self.scenario, lib.adversary(a), lib.detector(d), cfg.log_episodes,
                                     seeds[j], cfg.eval_batch, logdir, cfg.log_episodes)
                    files += sorted(logdir.glob("*"))
        self._finish("evaluate", files, iterations=cfg.iterations)

    def _stage_explain(self):
        cfg = self.cfg
        lib = self.library
        _, advs = self.lineup()
        n = self.scenario.model.n
        names, mats, hists, transitions = [], [], {}, {}
        for j, a in enumerate(advs):
            decisions = ev.collect_window_decisions(self.scenario, lib.adversary(a), cfg.explain_episodes,
                                                    stream_seed(cfg.seed, "explain", j), cfg.eval_batch)
            hists[a] = ev.droop_histogram_from_decisions(decisions)
            try:
                tm = ev.transition_matrix_from_decisions(decisions, n)
            except ev.EmptyMatrixError as exc:
                log.warning("no transition matrix for %s: %s", a, exc)
                transitions[a] = None
                continue
            names.append(a)
            mats.append(tm.matrix)
            transitions[a] = {"matrix": tm.matrix.tolist(), "observed_rows": tm.observed.tolist()}
        xdir = self.out / "explain"
        files = ev.emit_reports(xdir, distances=(names, ev.epsilon_matrix(mats)) if mats else None,
                                histograms=hists)
        write_atomic(xdir / "transitions.json", dumps_json(transitions))
        files.append(xdir / "transitions.json")
        self._finish("explain", files, iterations=cfg.iterations)

    def _stage_report(self):
        text = render_report(self.out)
        write_atomic(self.out / "report.md", text)
        self._finish("report", [self.out / "report.md"], iterations=self.cfg.iterations)


def render_report(out) -> str:
    """Plain-text summary of a run directory (accuracy %, unscaled frequency reward)."""
    out = Path(out)
    lines = ["# CARL run summary", ""]
    matrix = ev.CrossEvalMatrix.read_csv(out / "evaluation" / "cross_eval.csv")
    lines += ["## Cross evaluation (accuracy %, frequency reward)", "",
              "| detector | " + " | ".join(matrix.adversaries) + " |",
              "|---" * (len(matrix.adversaries) + 1) + "|"]
    for i, d in enumerate(matrix.detectors):
        cells = [f"{100 * matrix.accuracy[i, j]:.2f}%, {matrix.freq_reward[i, j]:.2f}"
                 for j in range(len(matrix.adversaries))]
        lines.append(f"| {d} | " + " | ".join(cells) + " |")
    forgetting = out / "evaluation" / "forgetting.csv"
    if forgetting.exists():
        lines += ["", "## Backward transfer", "", "| lag | factor | pairs |", "|---|---|---|"]
        with open(forgetting, newline="") as fh:
            for row in csv.DictReader(fh):
                lines.append(f"| {row['lag']} | {float(row['factor']):.3f} | {row['pairs_used']} |")
    hist = out / "explain" / "droop_hist.csv"
    if hist.exists():
        lines += ["", "## Droop decisions per window", "", "| adversary | -1 | 0 | +1 | muted |",
                  "|---|---|---|---|---|"]
        with open(hist, newline="") as fh:
            for row in csv.DictReader(fh):
                lines.append(f"| {row['adversary']} | {row['-1']} | {row['0']} | {row['+1']} | {row['muted']} |")
    eps = out / "explain" / "epsilon.csv"
    if eps.exists():
        with open(eps, newline="") as fh:
            rows = list(csv.reader(fh))
        lines += ["", "## Transition-matrix distance", "", "| | " + " | ".join(rows[0][1:]) + " |",
                  "|---" * len(rows[0]) + "|"]
        for row in rows[1:]:
            lines.append(f"| {row[0]} | " + " | ".join(f"{float(v):.3f}" for v in row[1:]) + " |")
    return "\n".join(lines) + "\n"
