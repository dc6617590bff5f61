"""Global configuration: a JSON file validated at startup; unknown keys are rejected."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .metrics import MetricConfig
from .sparse import Bm25Params


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackendEntry:
    base_url: str
    api_key_env: str = "OPENAI_API_KEY"


@dataclass(frozen=True)
class EmbedderEntry:
    kind: str = "test_hash"  # test_hash | file_lookup | http_endpoint
    dim: int = 8
    path: str | None = None
    base_url: str | None = None
    endpoint: str = "/v1/embeddings"
    model: str | None = None
    api_key_env: str | None = None


@dataclass(frozen=True)
class GlobalConfig:
    data_root: Path = Path("data")
    cache_dir: Path = Path(".ptkbench-cache")
    runs_dir: Path = Path("runs")
    backends: dict[str, BackendEntry] = field(default_factory=dict)
    metrics: MetricConfig = MetricConfig()
    bm25: Bm25Params = Bm25Params()
    embedder: EmbedderEntry = EmbedderEntry()


_TOP = {"paths", "backends", "metrics", "bm25", "embedder"}
_PATHS = {"data_root", "cache_dir", "runs_dir"}


def _check_keys(section: dict, allowed: set[str], where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}; allowed: {sorted(allowed)}")


def parse_config(doc: dict, base: Path | None = None) -> GlobalConfig:
    """Validate a config mapping; relative paths resolve against ``base``."""
    _check_keys(doc, _TOP, "config")
    paths = doc.get("paths", {})
    _check_keys(paths, _PATHS, "paths")
    resolve = lambda p: (base / p) if base is not None and not Path(p).is_absolute() else Path(p)
    kw = {k: resolve(v) for k, v in paths.items()}

    backends = {}
    for name, entry in doc.get("backends", {}).items():
        _check_keys(entry, {"base_url", "api_key_env"}, f"backends.{name}")
        if "base_url" not in entry:
            raise ConfigError(f"backends.{name}: base_url is required")
        backends[name] = BackendEntry(**entry)

    metric_keys = {"ndcg_cutoffs", "recall_cutoff", "binarization_threshold", "ndcg_gain", "mrr_cutoff",
                   "judged_cutoffs"}
    _check_keys(doc.get("metrics", {}), metric_keys, "metrics")
    _check_keys(doc.get("bm25", {}), {"k1", "b"}, "bm25")
    emb = doc.get("embedder", {})
    _check_keys(emb, set(EmbedderEntry.__dataclass_fields__), "embedder")
    try:
        metrics = MetricConfig.from_dict(doc.get("metrics", {}))
        bm25 = Bm25Params(**doc.get("bm25", {}))
        embedder = EmbedderEntry(**emb)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if embedder.kind not in ("test_hash", "file_lookup", "http_endpoint"):
        raise ConfigError(f"embedder.kind: unknown kind {embedder.kind!r}")
    return GlobalConfig(backends=backends, metrics=metrics, bm25=bm25, embedder=embedder, **kw)


def load_config(path: str | Path | None) -> GlobalConfig:
    if path is None:
        return GlobalConfig()
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from None
    return parse_config(doc, path.parent)
