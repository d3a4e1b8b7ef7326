"""Pipeline configuration: a YAML document mapped onto frozen dataclasses.

Only the keys documented in ``docs/config.md`` are accepted; anything else is
rejected so that a typo never silently falls back to a default.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .cluster.params import HdbscanParams, UmapParams
from .errors import ConfigError
from .spatial import ProjectionParams


@dataclass(frozen=True)
class BBox:
    min_lat: float
    min_lon: float
    max_lat: float
    max_lon: float

    def __post_init__(self):
        if not self.min_lat < self.max_lat:
            raise ValueError(f"bbox min_lat {self.min_lat} >= max_lat {self.max_lat}")
        if not self.min_lon < self.max_lon:
            raise ValueError(f"bbox min_lon {self.min_lon} >= max_lon {self.max_lon}")

    def contains(self, lat: float, lon: float) -> bool:
        return self.min_lat <= lat <= self.max_lat and self.min_lon <= lon <= self.max_lon

    def overpass(self) -> str:
        # Overpass order is (south, west, north, east)
        return f"{self.min_lat!r},{self.min_lon!r},{self.max_lat!r},{self.max_lon!r}"


@dataclass(frozen=True)
class TransitParams:
    impact_radius: float = 5000.0
    k_bus: int = 5
    theta: float = 500.0
    n_norm: float = 500.0
    sample_cap: int = 300


@dataclass(frozen=True)
class HospitalParams:
    k_hosp: int = 3
    d_norm: float = 1000.0
    influence_radius: float = 5000.0


@dataclass(frozen=True)
class IsolationParams:
    elev_threshold: float = 100.0
    radius: float = 3000.0


@dataclass(frozen=True)
class SupplyParams:
    k_highway: int = 3
    d_norm: float = 1000.0
    food_weight: float = 1.5
    base_weight: float = 1.0
    influence_radius: float = 5000.0


@dataclass(frozen=True)
class GreenParams:
    k_park: int = 3
    d_norm: float = 1000.0


@dataclass(frozen=True)
class IndicatorParams:
    transit: TransitParams = TransitParams()
    hospital: HospitalParams = HospitalParams()
    isolation: IsolationParams = IsolationParams()
    supply: SupplyParams = SupplyParams()
    green: GreenParams = GreenParams()
    population_per_residence: float = 2.5
    snap_k: int = 3
    snap_max_distance: float = 30.0

    def __post_init__(self):
        counts = [self.transit.k_bus, self.transit.sample_cap, self.hospital.k_hosp,
                  self.supply.k_highway, self.green.k_park, self.snap_k]
        if any(c < 1 for c in counts):
            raise ValueError("all indicator counts must be >= 1")
        positive = [self.transit.impact_radius, self.transit.theta, self.transit.n_norm,
                    self.hospital.d_norm, self.hospital.influence_radius,
                    self.isolation.elev_threshold, self.isolation.radius,
                    self.supply.d_norm, self.supply.influence_radius, self.green.d_norm,
                    self.snap_max_distance]
        if any(not (v > 0) for v in positive):
            raise ValueError("all radii, thresholds and normalisers must be > 0")
        if self.supply.food_weight < self.supply.base_weight:
            raise ValueError("food_weight must be >= base_weight")
        if self.population_per_residence < 0:
            raise ValueError("population_per_residence must be >= 0")


INDICATORS = ("transit", "hospital", "isolation", "supply", "green")


@dataclass(frozen=True)
class WeightVector:
    transit: float = 0.2
    hospital: float = 0.2
    isolation: float = 0.2
    supply: float = 0.2
    green: float = 0.2

    def __post_init__(self):
        vals = self.as_tuple()
        if any(v < 0 or not math.isfinite(v) for v in vals):
            raise ValueError(f"weights must be finite and >= 0, got {vals}")
        if abs(sum(vals) - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1 (got {sum(vals)!r})")

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.transit, self.hospital, self.isolation, self.supply, self.green)


@dataclass(frozen=True)
class LlmConfig:
    endpoint: str = "mock://five-section"
    model: str = "elyza-8b-lora"
    temperature: float = 0.3
    timeout_s: float = 60.0
    max_retries: int = 1

    def __post_init__(self):
        if not (0.0 <= self.temperature <= 2.0):
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be > 0")


@dataclass(frozen=True)
class FeatureOptions:
    attribute_features: tuple[str, ...] | None = None
    betweenness_sources: int = 256
    exact_betweenness_below: int = 2000


@dataclass(frozen=True)
class ClusterOptions:
    umap: UmapParams = UmapParams()
    hdbscan: HdbscanParams = HdbscanParams()
    combine_with: tuple[Path, ...] = ()


@dataclass(frozen=True)
class PipelineConfig:
    bbox: BBox
    projection: ProjectionParams
    elevation_path: Path
    indicator_params: IndicatorParams = IndicatorParams()
    weights: WeightVector = WeightVector()
    overpass_url: str = "https://overpass-api.de/api/interpreter"
    cache_dir: Path = Path("cache")
    llm: LlmConfig = LlmConfig()
    rng_seed: int = 0
    city: str = "city"
    output_dir: Path = Path("output")
    features: FeatureOptions = FeatureOptions()
    cluster: ClusterOptions = ClusterOptions()
    source_path: Path | None = field(default=None, compare=False)

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(self, rng_seed=seed,
                       cluster=replace(self.cluster, umap=replace(self.cluster.umap, seed=seed)))


_REQUIRED = ("bbox", "projection", "elevation_path")
_TOP_KEYS = {"bbox", "projection", "elevation_path", "overpass_url", "cache_dir", "rng_seed",
             "weights", "indicator_params", "llm", "city", "output_dir", "features", "umap",
             "hdbscan", "cluster"}


def _build(cls, data: Any, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        default = names[key].default
        if isinstance(default, (TransitParams, HospitalParams, IsolationParams,
                                SupplyParams, GreenParams)):
            kwargs[key] = _build(type(default), value, f"{where}.{key}")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _resolve(base: Path, value) -> Path:
    p = Path(str(value)).expanduser()
    return p if p.is_absolute() else (base / p)


def parse_config(raw: dict, base_dir: Path, stem: str = "config") -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    missing = [k for k in _REQUIRED if k not in raw]
    if missing:
        raise ConfigError(f"missing required keys {missing}")
    try:
        bbox = _build(BBox, raw["bbox"], "bbox")
        projection = _build(ProjectionParams, raw["projection"], "projection")
        weights = _build(WeightVector, raw.get("weights"), "weights")
        params = _build(IndicatorParams, raw.get("indicator_params"), "indicator_params")
        llm = _build(LlmConfig, raw.get("llm"), "llm")
        feats = raw.get("features") or {}
        if "attribute_features" in feats and feats["attribute_features"] is not None:
            feats = dict(feats, attribute_features=tuple(feats["attribute_features"]))
        features = _build(FeatureOptions, feats, "features")
        seed = int(raw.get("rng_seed", 0))
        umap_raw = dict(raw.get("umap") or {})
        umap_raw.setdefault("seed", seed)
        umap = _build(UmapParams, umap_raw, "umap")
        hdb = _build(HdbscanParams, raw.get("hdbscan"), "hdbscan")
        cl = raw.get("cluster") or {}
        if set(cl) - {"combine_with"}:
            raise ConfigError(f"cluster: unknown keys {sorted(set(cl) - {'combine_with'})}")
        combine = tuple(_resolve(base_dir, p) for p in (cl.get("combine_with") or ()))
        return PipelineConfig(
            bbox=bbox,
            projection=projection,
            elevation_path=_resolve(base_dir, raw["elevation_path"]),
            indicator_params=params,
            weights=weights,
            overpass_url=str(raw.get("overpass_url", PipelineConfig.overpass_url)),
            cache_dir=_resolve(base_dir, raw.get("cache_dir", "cache")),
            llm=llm,
            rng_seed=seed,
            city=str(raw.get("city", stem)),
            output_dir=_resolve(base_dir, raw.get("output_dir", f"{stem}_out")),
            features=features,
            cluster=ClusterOptions(umap=umap, hdbscan=hdb, combine_with=combine),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> PipelineConfig:
    """Read and validate a YAML config; relative paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    cfg = parse_config(raw, path.resolve().parent, stem=path.stem)
    return replace(cfg, source_path=path.resolve())
