"""Experiment configuration: JSON in, validated and canonicalised, components out."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from ..autoencoder import AutoencoderPair
from ..geometry import LinearManifold, make_manifold
from ..guidance import METHODS, GuidanceSettings, StepSizeSchedule
from ..losses import GuidanceLoss, LinearInverseLoss, QuadraticLoss, random_measurement
from ..prior import MixturePrior, random_prior, sample_prior
from ..sampler import NoiseSchedule

DEFAULTS = {
    "manifold": {"d": 64, "k": 8, "seed": 0},
    "prior": {"kind": "random", "components": 1, "seed": 1, "mean_scale": 0.0, "cov_scale": 1.0},
    "schedule": {"T": 50, "alpha_bar_mode": "linear_beta", "eta": 0.0},
    "method": "mpgd-ae",
    "loss": {"kind": "linear-inverse", "A_mode": "gaussian", "m": 4, "gamma": None,
             "noise_var": 0.05**2, "seed": 3, "truth_seed": 2},
    "step_size": {"mode": "constant", "rho": 1e-3, "match_dps": False},
    "ae": {"kind": "perfect", "scale": 0.0, "seed": 0},
    "window": [0.5, 0.3],
    "inner": {"steps": 1, "optimizer": "gd"},
    "travel": 0,
    "chains": 4,
    "master_seed": 0,
    "workers": 1,
    "output": {"dir": None, "trajectories": True},
}

# keys whose values do not change the sampled numbers
UNHASHED_KEYS = ("output", "workers")

LOSS_KEYS = {
    "linear-inverse": {"kind", "A_mode", "m", "gamma", "noise_var", "seed", "truth_seed", "A", "y"},
    "quadratic-target": {"kind", "target", "seed", "distance", "weight"},
}
PRIOR_KEYS = {
    "random": {"kind", "components", "seed", "mean_scale", "cov_scale"},
    "explicit": {"kind", "weights", "latent_means", "latent_covs"},
}


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def schema() -> dict:
    """The JSON schema document shipped with the package."""
    text = resources.files(__package__).joinpath("config.schema.json").read_text()
    return json.loads(text)


def _merge(defaults: dict, given: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        path = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(path, "unknown key")
        if isinstance(defaults[key], dict) and key not in ("prior", "loss"):
            if not isinstance(value, dict):
                raise ConfigError(path, "expected an object")
            out[key] = _merge(defaults[key], value, path + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _int(doc, key, path, lo=None, hi=None):
    value = doc.get(key)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}.{key}" if path else key, "expected an integer")
    if lo is not None and value < lo or hi is not None and value > hi:
        raise ConfigError(f"{path}.{key}" if path else key, f"out of range [{lo}, {hi}]")
    return value


def _num(doc, key, path, positive=False, lo=None, hi=None):
    value = doc.get(key)
    name = f"{path}.{key}" if path else key
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not np.isfinite(value):
        raise ConfigError(name, "expected a finite number")
    if positive and not value > 0:
        raise ConfigError(name, "must be positive")
    if lo is not None and value < lo or hi is not None and value > hi:
        raise ConfigError(name, f"out of range [{lo}, {hi}]")
    return float(value)


def _section(doc, name, allowed):
    section = doc[name]
    if not isinstance(section, dict):
        raise ConfigError(name, "expected an object")
    kind = section.setdefault("kind", DEFAULTS[name]["kind"])
    if kind not in allowed:
        raise ConfigError(f"{name}.kind", f"expected one of {sorted(allowed)}")
    for key in section:
        if key not in allowed[kind]:
            raise ConfigError(f"{name}.{key}", f"unknown key for kind {kind!r}")
    return section, kind


def _normalize_prior(doc):
    section, kind = _section(doc, "prior", PRIOR_KEYS)
    if kind == "random":
        out = {"kind": kind, "components": 1, "seed": 1, "mean_scale": 0.0, "cov_scale": 1.0}
        out.update(section)
        _int(out, "components", "prior", lo=1)
        _int(out, "seed", "prior", lo=0)
        _num(out, "mean_scale", "prior", lo=0.0)
        _num(out, "cov_scale", "prior", positive=True)
    else:
        out = dict(section)
        for key in ("weights", "latent_means", "latent_covs"):
            if key not in out:
                raise ConfigError(f"prior.{key}", "required for an explicit prior")
    return out


def _normalize_loss(doc):
    section, kind = _section(doc, "loss", LOSS_KEYS)
    if kind == "linear-inverse":
        out = dict(DEFAULTS["loss"])
        out.update(section)
        if out["A_mode"] not in ("gaussian", "explicit"):
            raise ConfigError("loss.A_mode", "expected 'gaussian' or 'explicit'")
        _num(out, "noise_var", "loss", positive=True)
        if out["gamma"] is not None:
            _num(out, "gamma", "loss", positive=True)
        if out["A_mode"] == "gaussian":
            _int(out, "m", "loss", lo=1)
            _int(out, "seed", "loss", lo=0)
            _int(out, "truth_seed", "loss", lo=0)
        else:
            for key in ("A", "y"):
                if key not in out:
                    raise ConfigError(f"loss.{key}", "required when A_mode is 'explicit'")
    else:
        out = {"kind": kind, "seed": 0, "distance": 6.0, "weight": 1.0, "target": None}
        out.update(section)
        _num(out, "weight", "loss", positive=True)
        if out["target"] is None:
            _int(out, "seed", "loss", lo=0)
            _num(out, "distance", "loss", lo=0.0)
    return out


def normalize(raw: dict) -> dict:
    """Fill defaults and validate; raises ConfigError naming the first bad key."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "expected a JSON object")
    doc = _merge(DEFAULTS, raw)
    m = doc["manifold"]
    d = _int(m, "d", "manifold", lo=2)
    _int(m, "k", "manifold", lo=1, hi=d - 1)
    _int(m, "seed", "manifold", lo=0)
    doc["prior"] = _normalize_prior(doc)
    s = doc["schedule"]
    _int(s, "T", "schedule", lo=1, hi=1000)
    if s["alpha_bar_mode"] not in ("linear_beta", "log_linear"):
        raise ConfigError("schedule.alpha_bar_mode", "expected 'linear_beta' or 'log_linear'")
    _num(s, "eta", "schedule", lo=0.0, hi=1.0)
    if doc["method"] not in METHODS:
        raise ConfigError("method", f"expected one of {list(METHODS)}")
    doc["loss"] = _normalize_loss(doc)
    st = doc["step_size"]
    if st["mode"] not in ("constant", "loss-normalized", "linear-decay"):
        raise ConfigError("step_size.mode", "expected constant, loss-normalized or linear-decay")
    _num(st, "rho", "step_size", positive=True)
    if not isinstance(st["match_dps"], bool):
        raise ConfigError("step_size.match_dps", "expected a boolean")
    ae = doc["ae"]
    if ae["kind"] not in ("perfect", "perturbed"):
        raise ConfigError("ae.kind", "expected 'perfect' or 'perturbed'")
    _num(ae, "scale", "ae", lo=0.0)
    _int(ae, "seed", "ae", lo=0)
    window = doc["window"]
    if window is not None:
        if (not isinstance(window, list) or len(window) != 2
                or not all(isinstance(w, (int, float)) and not isinstance(w, bool) for w in window)
                or not 0 <= window[1] <= window[0] <= 1):
            raise ConfigError("window", "expected [t_hi, t_lo] with 0 <= t_lo <= t_hi <= 1, or null")
    inner = doc["inner"]
    _int(inner, "steps", "inner", lo=1)
    if inner["optimizer"] not in ("gd", "cg"):
        raise ConfigError("inner.optimizer", "expected 'gd' or 'cg'")
    _int(doc, "travel", "", lo=0)
    _int(doc, "chains", "", lo=1)
    _int(doc, "master_seed", "", lo=0, hi=2**64 - 1)
    _int(doc, "workers", "", lo=1)
    out = doc["output"]
    if out["dir"] is not None and not isinstance(out["dir"], str):
        raise ConfigError("output.dir", "expected a path string or null")
    if not isinstance(out["trajectories"], bool):
        raise ConfigError("output.trajectories", "expected a boolean")
    return doc


def canonical_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """A validated configuration document with all defaults filled in."""

    doc: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        cfg = cls(normalize(raw))
        cfg.build()  # constructibility check before any sampling
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError("<file>", str(exc)) from exc
        return cls.from_json(text)

    def to_json(self) -> str:
        return json.dumps(self.doc, sort_keys=True, indent=2)

    def __getitem__(self, key):
        return self.doc[key]

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and canonical_json(self.doc) == canonical_json(other.doc)

    __hash__ = None

    def replace(self, **updates) -> "ExperimentConfig":
        """New config with top-level sections replaced (nested dicts merge)."""
        raw = copy.deepcopy(self.doc)
        for key, value in updates.items():
            if isinstance(value, dict) and isinstance(raw.get(key), dict) and key not in ("prior", "loss"):
                raw[key].update(value)
            else:
                raw[key] = value
        return ExperimentConfig.from_dict(raw)

    @property
    def hash(self) -> str:
        hashed = {k: v for k, v in self.doc.items() if k not in UNHASHED_KEYS}
        return hashlib.sha256(canonical_json(hashed).encode()).hexdigest()

    def build(self) -> "Components":
        return build_components(self.doc)


@dataclass(frozen=True, eq=False)
class Components:
    manifold: LinearManifold
    prior: MixturePrior
    schedule: NoiseSchedule
    loss: GuidanceLoss
    pair: AutoencoderPair
    settings: GuidanceSettings


def _build_prior(doc, manifold):
    p = doc["prior"]
    try:
        if p["kind"] == "random":
            return random_prior(manifold, p["components"], p["seed"], p["mean_scale"], p["cov_scale"])
        return MixturePrior(manifold, p["weights"], p["latent_means"], p["latent_covs"])
    except (ValueError, TypeError) as exc:
        raise ConfigError("prior", str(exc)) from exc


def _build_loss(doc, manifold, prior):
    entry = doc["loss"]
    d = manifold.d
    if entry["kind"] == "linear-inverse":
        if entry["A_mode"] == "gaussian":
            x_true = sample_prior(prior, 1, entry["truth_seed"])[0]
            return random_measurement(manifold, x_true, entry["m"], entry["noise_var"], entry["seed"],
                                      entry["gamma"])
        gamma = entry["gamma"] if entry["gamma"] is not None else 1.0 / (2.0 * entry["noise_var"])
        try:
            loss = LinearInverseLoss(entry["A"], entry["y"], gamma)
        except (ValueError, TypeError) as exc:
            raise ConfigError("loss.A", str(exc)) from exc
        if loss.A.shape[1] != d:
            raise ConfigError("loss.A", f"expected {d} columns, got {loss.A.shape[1]}")
        return loss
    if entry["target"] is not None:
        target = np.asarray(entry["target"], dtype=float)
        if target.shape != (d,):
            raise ConfigError("loss.target", f"expected a length-{d} vector")
    else:
        target = far_target(prior, entry["distance"], entry["seed"])
    return QuadraticLoss(target, entry["weight"] * np.eye(d))


def far_target(prior: MixturePrior, distance: float, seed) -> np.ndarray:
    """An on-manifold point ``distance`` away from the prior mean along a random direction."""
    rng = np.random.default_rng(seed)
    k = prior.manifold.k
    direction = rng.standard_normal(k)
    direction /= np.linalg.norm(direction)
    centre = prior.weights @ prior.latent_means
    return prior.manifold.embed(centre + distance * direction)


def build_components(doc: dict) -> Components:
    m = doc["manifold"]
    manifold = make_manifold(m["d"], m["k"], m["seed"])
    prior = _build_prior(doc, manifold)
    s = doc["schedule"]
    schedule = NoiseSchedule.from_mode(s["alpha_bar_mode"], s["T"], s["eta"])
    loss = _build_loss(doc, manifold, prior)
    ae = doc["ae"]
    scale = ae["scale"] if ae["kind"] == "perturbed" else 0.0
    pair = AutoencoderPair(manifold, scale, ae["seed"])
    st = doc["step_size"]
    window = tuple(doc["window"]) if doc["window"] is not None else None
    settings = GuidanceSettings(doc["method"], StepSizeSchedule(st["mode"], st["rho"], st["match_dps"]),
                                pair, window, doc["inner"]["steps"], doc["inner"]["optimizer"],
                                doc["travel"])
    return Components(manifold, prior, schedule, loss, pair, settings)
