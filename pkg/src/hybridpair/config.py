"""Run configuration: one YAML file holding every sub-config, validated with line-anchored errors."""
from __future__ import annotations

import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .ce import CEConfig
from .cost import CostWeights
from .distributions import HybridParams
from .features import WindowSpec
from .mlcp import ForestConfig
from .sim import GridMap, ScenarioConfig
from .util import canonical_json, derive_seed, sha256_text

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, message, source="<config>", line=None):
        where = f"{source}:{line}" if line is not None else str(source)
        super().__init__(f"{where}: {message}")
        self.line = line


@dataclass(frozen=True)
class PriorSpec:
    move_probs: tuple
    accel_mean: float = 0.0
    accel_var: float = 1.0

    def params(self, steps: int) -> HybridParams:
        return HybridParams.from_move_probs(list(self.move_probs), steps, mean=self.accel_mean, var=self.accel_var)


@dataclass(frozen=True)
class GenerationConfig:
    pairs: int = 20
    variants_per_pair: int = 1
    variant_band: tuple = (2.0, 6.0)
    variant_budget: int = 500
    variant_broaden: float = 0.3
    rudimentary: int = 100

    def __post_init__(self):
        if self.pairs < 1:
            raise ValueError("pairs must be at least 1")
        if self.variants_per_pair < 0 or self.rudimentary < 0 or self.variant_budget < 0:
            raise ValueError("variants_per_pair, variant_budget and rudimentary must be non-negative")
        if len(self.variant_band) != 2 or self.variant_band[0] > self.variant_band[1]:
            raise ValueError("variant_band must be [low, high] with low <= high")
        if not 0.0 <= self.variant_broaden <= 1.0:
            raise ValueError("variant_broaden must lie in [0, 1]")


@dataclass(frozen=True)
class DatasetConfig:
    ones: int | None = None
    zeros: int | None = None
    mix: dict | None = None

    def __post_init__(self):
        if self.mix is not None and (self.ones is not None or self.zeros is not None):
            raise ValueError("give either mix or ones/zeros, not both")
        if (self.ones is None) != (self.zeros is None):
            raise ValueError("ones and zeros go together")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    scenario: ScenarioConfig
    ce: CEConfig
    cost: CostWeights
    generation: GenerationConfig
    window: WindowSpec
    dataset: DatasetConfig
    forest: ForestConfig
    sweep_x: tuple = (1.0, 2.0, 3.0, 4.0, 5.0)
    monitor_stride: float = 0.5
    output_dir: str = "runs/out"
    source_text: str = field(default="", repr=False, compare=False)

    def sub_seed(self, label: str) -> int:
        return derive_seed(self.seed, label)

    def ce_config(self) -> CEConfig:
        return replace(self.ce, seed=self.sub_seed("ce"))

    def forest_config(self) -> ForestConfig:
        return replace(self.forest, seed=self.sub_seed("forest"))

    def digest(self) -> str:
        return sha256_text(canonical_json({"seed": self.seed, "text": self.source_text}))[:16]


# -- YAML with line numbers ------------------------------------------------------

def _line_map(text: str) -> dict:
    """Dotted key path -> 1-based line number, from the YAML node tree."""
    lines = {}
    root = yaml.compose(text)

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}.{k.value}" if prefix else str(k.value)
                lines[path] = k.start_mark.line + 1
                walk(v, path)

    if root is not None:
        walk(root, "")
    return lines


TOP_KEYS = {"schema_version", "seed", "output_dir", "scenario", "ce", "cost", "generation",
            "window", "dataset", "forest", "sweep", "monitor"}
SCENARIO_KEYS = {f.name for f in fields(ScenarioConfig)} - {"adv_prior", "ind_prior", "ind_script", "grid"}
SCENARIO_KEYS |= {"path_steps", "adversary_prior", "independent_prior", "grid"}


class _Loader:
    def __init__(self, text, source):
        self.source = source
        try:
            self.data = yaml.safe_load(text) or {}
            self.lines = _line_map(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ConfigError(f"YAML syntax: {getattr(exc, 'problem', exc)}", source,
                              mark.line + 1 if mark else None) from None
        if not isinstance(self.data, dict):
            raise ConfigError("top level must be a mapping", source, 1)

    def fail(self, path, message):
        line = self.lines.get(path)
        while line is None and "." in path:
            path = path.rsplit(".", 1)[0]
            line = self.lines.get(path)
        raise ConfigError(message, self.source, line)

    def section(self, name, allowed=None, required=False) -> dict:
        sec = self.data.get(name)
        if sec is None:
            if required:
                raise ConfigError(f"missing required section '{name}'", self.source, None)
            return {}
        if not isinstance(sec, dict):
            self.fail(name, f"'{name}' must be a mapping")
        if allowed is not None:
            for k in sec:
                if k not in allowed:
                    self.fail(f"{name}.{k}", f"unknown field '{name}.{k}'")
        return sec

    def build(self, name, ctor, values: dict):
        """Call ``ctor(**values)``; a ValueError is re-raised at the line of the field it names."""
        defaults = {f.name: f.default for f in fields(ctor)} if hasattr(ctor, "__dataclass_fields__") else {}
        for key, value in values.items():
            d = defaults.get(key)
            numeric = isinstance(d, (int, float)) and not isinstance(d, bool)
            if numeric and (isinstance(value, (str, bool)) or value is None):
                self.fail(f"{name}.{key}", f"{name}.{key} must be a number, got {value!r}")
        try:
            return ctor(**values)
        except (TypeError, ValueError) as exc:
            msg = str(exc)
            for key in sorted(values, key=len, reverse=True):
                if re.search(rf"\b{re.escape(key)}\b", msg):
                    self.fail(f"{name}.{key}", f"{name}.{key}: {msg}")
            self.fail(name, f"{name}: {msg}")


def _prior(ld: _Loader, path: str, raw) -> PriorSpec:
    if not isinstance(raw, dict):
        ld.fail(path, f"'{path}' must be a mapping with move_probs")
    for k in raw:
        if k not in ("move_probs", "accel_mean", "accel_var"):
            ld.fail(f"{path}.{k}", f"unknown field '{path}.{k}'")
    if "move_probs" not in raw:
        ld.fail(path, f"'{path}' needs move_probs")
    return ld.build(path, PriorSpec, {**raw, "move_probs": tuple(raw["move_probs"])})


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    ld = _Loader(text, source)
    for k in ld.data:
        if k not in TOP_KEYS:
            ld.fail(k, f"unknown top-level field '{k}'")
    version = ld.data.get("schema_version")
    if version != SCHEMA_VERSION:
        ld.fail("schema_version", f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    seed = ld.data.get("seed")
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        ld.fail("seed", "seed must be a non-negative integer")

    sc = dict(ld.section("scenario", SCENARIO_KEYS, required=True))
    steps = sc.pop("path_steps", None)
    if not isinstance(steps, int) or steps < 1:
        ld.fail("scenario.path_steps", "scenario.path_steps must be a positive integer")
    if "adversary_prior" not in sc:
        ld.fail("scenario", "scenario.adversary_prior is required")
    adv = _prior(ld, "scenario.adversary_prior", sc.pop("adversary_prior"))
    ind_raw = sc.pop("independent_prior", None)
    ind = _prior(ld, "scenario.independent_prior", ind_raw) if ind_raw is not None else adv
    grid_raw = sc.pop("grid", None) or {}
    grid = ld.build("scenario.grid", GridMap, grid_raw)
    for key in ("adv_start", "ind_start", "bbox"):
        if key in sc:
            sc[key] = tuple(sc[key])
    try:
        adv_params, ind_params = adv.params(steps), ind.params(steps)
    except ValueError as exc:
        ld.fail("scenario.adversary_prior", f"scenario prior: {exc}")
    scenario = ld.build("scenario", ScenarioConfig,
                        {**sc, "grid": grid, "adv_prior": adv_params, "ind_prior": ind_params})

    ce = ld.build("ce", CEConfig, {"seed": seed, **ld.section("ce", {f.name for f in fields(CEConfig)} - {"seed"})})
    cost = ld.build("cost", CostWeights, ld.section("cost", {f.name for f in fields(CostWeights)}))
    gen_raw = dict(ld.section("generation", {f.name for f in fields(GenerationConfig)}))
    if "variant_band" in gen_raw:
        gen_raw["variant_band"] = tuple(gen_raw["variant_band"])
    generation = ld.build("generation", GenerationConfig, gen_raw)
    window = ld.build("window", WindowSpec, ld.section("window", {"X", "Y", "R"}, required=True))
    dataset = ld.build("dataset", DatasetConfig, ld.section("dataset", {"ones", "zeros", "mix"}))
    forest = ld.build("forest", ForestConfig,
                      {"seed": seed, **ld.section("forest", {f.name for f in fields(ForestConfig)} - {"seed"})})
    sweep = ld.section("sweep", {"x"})
    xs = tuple(float(x) for x in sweep.get("x", (1, 2, 3, 4, 5)))
    monitor = ld.section("monitor", {"stride"})
    stride = float(monitor.get("stride", 0.5))
    if stride <= 0:
        ld.fail("monitor.stride", "monitor.stride must be positive")
    return RunConfig(seed=seed, scenario=scenario, ce=ce, cost=cost, generation=generation, window=window,
                     dataset=dataset, forest=forest, sweep_x=xs, monitor_stride=stride,
                     output_dir=str(ld.data.get("output_dir", "runs/out")), source_text=text)


def load_config(path, seed_override: int | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("config file not found", str(path))
    cfg = parse_config(path.read_text(), str(path))
    if seed_override is not None:
        cfg = replace(cfg, seed=int(seed_override))
    return cfg
