"""Experiment configuration: defaults, key=value files, env overrides, validation.

Every setting has one flat key (``rounds``, ``dp_sigma``, ...). Values are
layered with precedence flags > environment (``MVDSSM_<KEY>``) > config file
> defaults, then checked together so that every problem is reported at once.
"""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping

from .federation import ConfigError, FederationConfig
from .movielens import SplitKind
from .privacy import DpParams

ENV_PREFIX = "MVDSSM_"


class Variant(str, enum.Enum):
    FL_MV_DSSM = "fl-mv-dssm"
    SEMI = "semi"
    FL_DSSM = "fl-dssm"
    CENTRALIZED = "centralized"


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_int(text: str) -> int | None:
    return None if str(text).strip().lower() in ("", "none", "all") else int(text)


def _optional_float(text: str) -> float | None:
    return None if str(text).strip().lower() in ("", "none", "off") else float(text)


# key -> (parser, default); the defaults are the reference hyper-parameters
FIELDS: dict[str, tuple[Callable[[str], Any], Any]] = {
    "variant": (Variant, Variant.FL_MV_DSSM),
    "view": (_optional_int, None),
    "scenario": (SplitKind, SplitKind.RANDOM),
    "data_dir": (str, "data/ml-100k"),
    "out": (str, "runs/latest"),
    "builds": (int, 3),
    "seed": (int, 0),
    "rounds": (int, 100),
    "clients_per_round": (int, 100),
    "batch_size": (int, 20),
    "client_lr": (float, 0.2),
    "server_lr": (float, 0.001),
    "local_steps": (int, 1),
    "gamma": (float, 1.0),
    "neg": (int, 4),
    "aggregate_user": (_bool, True),
    "dp": (_bool, True),
    "dp_sigma": (float, 1.0),
    "dp_clip": (float, 0.5),
    "dp_delta": (float, 1e-3),
    "dp_batch": (_optional_int, None),
    "predict_sigma": (_optional_float, None),
    "secure_agg": (_bool, False),
    "secagg_threshold": (_optional_int, None),
    "dropout": (float, 0.0),
    "svd_dim": (int, 30),
    "eval_every": (int, 10),
    "auc_negatives": (_optional_int, 100),
    "central_epochs": (int, 3),
}


@dataclass
class ExperimentSpec:
    """A fully resolved experiment: what to run, on which split, how often."""

    variant: Variant
    scenario: SplitKind
    federation: FederationConfig
    view: int | None = None
    builds: int = 3
    seed: int = 0
    data_dir: str = "data/ml-100k"
    out: str = "runs/latest"
    svd_dim: int = 30
    auc_negatives: int | None = 100
    values: dict[str, Any] = field(default_factory=dict)  # the resolved flat keys

    @property
    def label(self) -> str:
        if self.variant in (Variant.FL_DSSM, Variant.CENTRALIZED):
            return f"{self.variant.value}-view{self.view}"
        return self.variant.value

    def build_seeds(self) -> list[int]:
        return [self.seed + b for b in range(self.builds)]

    def for_build(self, seed: int) -> FederationConfig:
        return replace(self.federation, seed=seed)


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError([f"{path}:{n}: expected key = value"])
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX) :].lower()
            if key in FIELDS:
                out[key] = value
    return out


def layer(*sources: Mapping[str, Any] | None) -> dict[str, Any]:
    """Merge sources left to right, later ones winning; ``None`` values are skipped."""
    merged: dict[str, Any] = {}
    for src in sources:
        for k, v in (src or {}).items():
            if v is not None:
                merged[k] = v
    return merged


def validate_config(overrides: Mapping[str, Any] | None = None) -> ExperimentSpec:
    """Fill defaults, parse values and check consistency; raises ConfigError listing every problem."""
    overrides = dict(overrides or {})
    problems: list[str] = []
    values: dict[str, Any] = {}
    for key in sorted(set(overrides) - set(FIELDS)):
        problems.append(f"unknown setting {key!r}")
    for key, (parse, default) in FIELDS.items():
        if key not in overrides:
            values[key] = default
            continue
        raw = overrides[key]
        try:
            values[key] = raw if _already(raw, parse, default) else parse(str(raw))
        except ValueError as exc:
            problems.append(f"{key}: {exc}")
            values[key] = default

    variant, view = values["variant"], values["view"]
    if variant in (Variant.FL_DSSM, Variant.CENTRALIZED):
        if view not in (1, 2):
            problems.append(f"variant {variant.value} needs view 1 or 2")
        views: tuple[int, ...] = (view,) if view in (1, 2) else (1,)
    else:
        if view is not None:
            problems.append(f"variant {variant.value} uses both views; drop 'view'")
        views = (1, 2)
    if variant is Variant.CENTRALIZED and values["secure_agg"]:
        problems.append("secure aggregation has no meaning for centralized training")
    if values["builds"] < 1:
        problems.append("builds must be >= 1")
    if values["rounds"] < 1:
        problems.append(f"rounds must be >= 1, got {values['rounds']}")
    if values["svd_dim"] < 1:
        problems.append("svd_dim must be >= 1")
    if values["auc_negatives"] is not None and values["auc_negatives"] < 1:
        problems.append("auc_negatives must be >= 1 (or 'all')")
    if values["central_epochs"] < 1:
        problems.append("central_epochs must be >= 1")

    dp = predict = None
    if values["dp"]:
        try:
            dp = DpParams(values["dp_clip"], values["dp_sigma"], values["dp_delta"], values["dp_batch"])
        except ValueError as exc:
            problems.append(str(exc))
    if values["predict_sigma"] is not None:
        try:
            predict = DpParams(values["dp_clip"], values["predict_sigma"], values["dp_delta"])
        except ValueError as exc:
            problems.append(f"predict_sigma: {exc}")

    fed = FederationConfig(
        rounds=values["rounds"],
        clients_per_round=values["clients_per_round"],
        views=views,
        client_lr=values["client_lr"],
        server_lr=values["server_lr"],
        batch_size=values["batch_size"],
        gamma=values["gamma"],
        n_neg=values["neg"],
        aggregate_user=values["aggregate_user"] and variant is not Variant.SEMI,
        local_steps=values["local_steps"],
        dp=dp,
        predict_dp=predict,
        secure_agg=values["secure_agg"],
        secagg_threshold=values["secagg_threshold"],
        dropout=values["dropout"],
        seed=values["seed"],
        eval_every=values["eval_every"],
        central_epochs=values["central_epochs"],
    )
    problems.extend(p for p in fed.problems() if p not in problems)
    if variant is Variant.SEMI and "aggregate_user" in overrides and values["aggregate_user"]:
        problems.append("variant semi keeps user towers local; aggregate_user must be false")
    if problems:
        raise ConfigError(problems)
    if variant is Variant.SEMI:
        values["aggregate_user"] = False
    return ExperimentSpec(
        variant=variant,
        scenario=values["scenario"],
        federation=fed,
        view=view,
        builds=values["builds"],
        seed=values["seed"],
        data_dir=values["data_dir"],
        out=values["out"],
        svd_dim=values["svd_dim"],
        auc_negatives=values["auc_negatives"],
        values=values,
    )


def _already(raw: Any, parse: Callable, default: Any) -> bool:
    # typed values (from code, not text) pass through unchanged
    if isinstance(raw, str):
        return False
    if isinstance(parse, type) and isinstance(raw, parse):
        return True
    return isinstance(raw, (int, float, bool)) and not isinstance(default, enum.Enum)


def format_value(value: Any) -> str:
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, float):
        return "inf" if math.isinf(value) else repr(value)
    return str(value)


def echo_config(spec: ExperimentSpec) -> str:
    """The resolved settings as a config file that reproduces the run."""
    return "".join(f"{k} = {format_value(spec.values[k])}\n" for k in FIELDS)
