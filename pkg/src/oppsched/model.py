"""System parameters: per-class traffic, channel distributions, departure probabilities.

Classes are indexed 0-based throughout the library; user-facing output
(CLI, error messages) reports them 1-based. Channel states of a class are
0-based positions in its ``q``/``mu`` vectors; the best state of a class is
the last position, which must carry positive channel probability.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Iterable

PROB_SUM_TOL = 1e-12

ARRIVAL_KINDS = ("bernoulli", "poisson")


class ConfigError(ValueError):
    """A configuration violates model invariants. Carries every violation found."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class ClassParams:
    """Traffic and channel parameters of one user class.

    lam   -- expected arrivals per slot
    q     -- channel-state probabilities (may contain zeros; zero-q states are
             carried through but skipped by every probabilistic computation)
    mu    -- departure probability when served in each state, nondecreasing
             over the q>0 states; the last state needs q*mu > 0
    cost  -- holding cost per user per slot
    """

    lam: float
    q: tuple[float, ...]
    mu: tuple[float, ...]
    cost: float = 1.0

    @property
    def n_states(self) -> int:
        return len(self.q)

    @property
    def support(self) -> tuple[int, ...]:
        """0-based states with positive channel probability."""
        return tuple(n for n, qn in enumerate(self.q) if qn > 0.0)

    @property
    def mu_best(self) -> float:
        """Departure probability in the best (last) state."""
        return self.mu[-1]

    @property
    def rho(self) -> float:
        """Traffic contribution lam / mu_best of this class."""
        return self.lam / self.mu[-1]


@dataclass(frozen=True)
class SystemConfig:
    """Complete multiclass system: class list, arrival law, base RNG seed."""

    classes: tuple[ClassParams, ...]
    arrival_kind: str = "bernoulli"
    seed: int = 0

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def with_lambda(self, cls: int, lam: float) -> "SystemConfig":
        """Copy of the config with class ``cls`` given arrival rate ``lam``."""
        classes = list(self.classes)
        classes[cls] = replace(classes[cls], lam=lam)
        return replace(self, classes=tuple(classes))


@dataclass(frozen=True)
class RateParams:
    """Physical-layer description: per-state rate (kb/s), slot length (s), mean job size (kb)."""

    rates: tuple[float, ...]
    slot_length: float
    mean_size: float


def mu_from_rates(rp: RateParams) -> tuple[float, ...]:
    """Convert transmission rates to per-slot departure probabilities.

    mu[n] = rates[n] * slot_length / mean_size. Valid only while every value
    stays <= 1 (one slot must not exceed the remaining work on average).
    """
    errs = []
    if rp.slot_length <= 0:
        errs.append("slot_length must be > 0")
    if rp.mean_size <= 0:
        errs.append("mean_size must be > 0")
    if any(r < 0 for r in rp.rates):
        errs.append("rates must be nonnegative")
    if any(b < a for a, b in zip(rp.rates, rp.rates[1:])):
        errs.append("rates must be nondecreasing")
    if errs:
        raise ConfigError(errs)
    mu = tuple(r * rp.slot_length / rp.mean_size for r in rp.rates)
    if any(m > 1.0 for m in mu):
        raise ConfigError(
            ["slot can exceed remaining work; geometric approximation invalid"]
        )
    return mu


def violations(cfg: SystemConfig) -> list[str]:
    """All invariant violations of ``cfg``, empty when valid."""
    errs: list[str] = []
    if cfg.n_classes < 1:
        errs.append("config: needs at least one class")
    if cfg.arrival_kind not in ARRIVAL_KINDS:
        errs.append(f"config: unknown arrival_kind {cfg.arrival_kind!r}")
    for k, cp in enumerate(cfg.classes, start=1):
        where = f"class {k}"
        if len(cp.q) == 0 or len(cp.q) != len(cp.mu):
            errs.append(f"{where}: q and mu must be nonempty and equally long")
            continue
        if any(not (0.0 <= v <= 1.0) for v in cp.q):
            errs.append(f"{where}: q entries must lie in [0, 1]")
        if abs(math.fsum(cp.q) - 1.0) > PROB_SUM_TOL:
            errs.append(f"{where}: q does not sum to 1")
        if any(not (0.0 <= v <= 1.0) for v in cp.mu):
            errs.append(f"{where}: mu entries must lie in [0, 1]")
        sup_mu = [cp.mu[n] for n in cp.support]
        if any(b < a for a, b in zip(sup_mu, sup_mu[1:])):
            errs.append(f"{where}: mu not nondecreasing")
        if not (cp.q[-1] > 0.0 and cp.mu[-1] > 0.0):
            errs.append(f"{where}: best state needs q*mu > 0")
        if cp.lam < 0:
            errs.append(f"{where}: lambda must be >= 0")
        if cfg.arrival_kind == "bernoulli" and cp.lam > 1.0:
            errs.append(f"{where}: lambda must be <= 1 under Bernoulli arrivals")
        if not cp.cost > 0:
            errs.append(f"{where}: cost must be > 0")
    return errs


def validate(cfg: SystemConfig) -> SystemConfig:
    """Return ``cfg`` unchanged if valid, otherwise raise ConfigError with all violations."""
    errs = violations(cfg)
    if errs:
        raise ConfigError(errs)
    return cfg


# ---------------------------------------------------------------------------
# JSON round trip


def config_to_dict(cfg: SystemConfig) -> dict:
    return {
        "classes": [
            {"lambda": cp.lam, "q": list(cp.q), "mu": list(cp.mu), "cost": cp.cost}
            for cp in cfg.classes
        ],
        "arrival_kind": cfg.arrival_kind,
        "seed": cfg.seed,
    }


def config_from_dict(doc: dict) -> SystemConfig:
    try:
        raw_classes = doc["classes"]
    except (KeyError, TypeError):
        raise ConfigError(["config: missing top-level 'classes' array"]) from None
    classes = []
    for k, item in enumerate(raw_classes, start=1):
        if "mu" in item:
            mu = tuple(float(v) for v in item["mu"])
        elif "rate_params" in item:
            rp = item["rate_params"]
            mu = mu_from_rates(
                RateParams(
                    rates=tuple(float(v) for v in rp["rates"]),
                    slot_length=float(rp["slot_length"]),
                    mean_size=float(rp["mean_size"]),
                )
            )
        else:
            raise ConfigError([f"class {k}: needs either 'mu' or 'rate_params'"])
        classes.append(
            ClassParams(
                lam=float(item["lambda"]),
                q=tuple(float(v) for v in item["q"]),
                mu=mu,
                cost=float(item.get("cost", 1.0)),
            )
        )
    cfg = SystemConfig(
        classes=tuple(classes),
        arrival_kind=str(doc.get("arrival_kind", "bernoulli")),
        seed=int(doc.get("seed", 0)),
    )
    return validate(cfg)


def load_config(path: str | Path) -> SystemConfig:
    """Load and validate a JSON config; mu is derived from rate_params when given."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"parse error: {exc}"]) from exc
    return config_from_dict(doc)


def save_config(cfg: SystemConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n")


def bundled_config_path(name: str) -> Path:
    """Filesystem path of a config shipped with the package (e.g. 'cdma_table1')."""
    res = resources.files("oppsched.data").joinpath(f"{name}.json")
    return Path(str(res))
