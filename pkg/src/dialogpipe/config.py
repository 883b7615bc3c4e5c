"""Pipeline configuration (TOML).

Example::

    [paths]
    workspace = "work"
    call_log = "work/calls.jsonl"

    [[profiles]]
    name = "gpt"
    kind = "http_openai_compatible"
    endpoint = "https://api.example.com/v1/chat/completions"
    auth_env = "OPENAI_API_KEY"
    model = "gpt-3.5-turbo"
    retry = { max_attempts = 5, backoff_base = 2.0 }

    [[profiles]]
    name = "offline"
    kind = "scripted_mock"
    script_path = "mocks/assistant.jsonl"

    [collect]
    target_turns = 10

Secrets are never read from the file; ``auth_env`` names the environment
variable and is only consulted when a request is sent.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .curation import DropMode, FilterPolicy, SelectionPolicy
from .errors import ConfigError
from .gateway import BackendKind, BackendProfile, RetryPolicy

SECTION_KEYS: dict[str, set[str]] = {
    "paths": {"workspace", "call_log"},
    "collect": {"target_turns", "workers", "simulator_mode", "sample", "sample_seed"},
    "filter": {"min_query_chars", "repetition_threshold", "blocklist_path", "drop_mode"},
    "ctx": {"policy", "judge", "workers"},
    "capo": {"strategies", "limit", "workers", "backend"},
    "export": {"max_units", "unit", "template", "direction"},
    "eval": {"retries", "workers", "referenced", "n_turns"},
}
PROFILE_KEYS = {f.name for f in dataclasses.fields(BackendProfile)}
RETRY_KEYS = {f.name for f in dataclasses.fields(RetryPolicy)}


@dataclasses.dataclass(frozen=True)
class PipelineConfig:
    profiles: Mapping[str, BackendProfile] = dataclasses.field(default_factory=dict)
    paths: Mapping[str, str] = dataclasses.field(default_factory=dict)
    collect: Mapping[str, Any] = dataclasses.field(default_factory=dict)
    filter: Mapping[str, Any] = dataclasses.field(default_factory=dict)
    ctx: Mapping[str, Any] = dataclasses.field(default_factory=dict)
    capo: Mapping[str, Any] = dataclasses.field(default_factory=dict)
    export: Mapping[str, Any] = dataclasses.field(default_factory=dict)
    eval: Mapping[str, Any] = dataclasses.field(default_factory=dict)
    source: str | None = None

    def profile(self, name: str) -> BackendProfile:
        try:
            return self.profiles[name]
        except KeyError:
            known = ", ".join(sorted(self.profiles)) or "none"
            raise ConfigError(f"unknown profile {name!r} (configured: {known})") from None

    def filter_policy(self, **overrides: Any) -> FilterPolicy:
        values = {**self.filter, **{k: v for k, v in overrides.items() if v is not None}}
        if "drop_mode" in values:
            values["drop_mode"] = DropMode(values["drop_mode"])
        return FilterPolicy(**values)

    def snapshot(self) -> dict[str, Any]:
        """JSON-safe view for manifests. Profiles carry no secrets."""
        return {
            "source": self.source,
            "profiles": {k: p.to_dict() for k, p in sorted(self.profiles.items())},
            "paths": dict(self.paths),
            "collect": dict(self.collect),
            "filter": dict(self.filter),
            "ctx": dict(self.ctx),
            "capo": dict(self.capo),
            "export": dict(self.export),
            "eval": dict(self.eval),
        }


def _check_keys(where: str, got: Mapping[str, Any], allowed: set[str]) -> None:
    unknown = sorted(set(got) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")


def parse_config(text: str, base_dir: Path | None = None, source: str | None = None) -> PipelineConfig:
    where = source or "<config>"
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        # message already carries "(at line L, column C)"
        raise ConfigError(f"{where}: parse error: {exc}") from exc
    _check_keys(where, raw, set(SECTION_KEYS) | {"profiles"})
    profiles: dict[str, BackendProfile] = {}
    entries = raw.get("profiles", [])
    if not isinstance(entries, list):
        raise ConfigError(f"{where}: 'profiles' must be an array of tables ([[profiles]])")
    for i, entry in enumerate(entries):
        label = f"{where}: profiles[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError(f"{label}: expected a table")
        _check_keys(label, entry, PROFILE_KEYS)
        name = entry.get("name")
        if not name:
            raise ConfigError(f"{label}: missing name")
        if name in profiles:
            raise ConfigError(f"{where}: duplicate profile name {name!r}")
        data = dict(entry)
        retry = data.pop("retry", {})
        _check_keys(f"{label}.retry", retry, RETRY_KEYS)
        script = data.pop("script_path", None)
        if script and base_dir and not Path(script).is_absolute():
            script = str(base_dir / script)
        try:
            data["kind"] = BackendKind(data.get("kind", ""))
            profiles[name] = BackendProfile(retry=RetryPolicy(**retry), script_path=script, **data)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{label} ({name}): {exc}") from exc
    sections: dict[str, dict[str, Any]] = {}
    for section, allowed in SECTION_KEYS.items():
        body = raw.get(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"{where}: [{section}] must be a table")
        _check_keys(f"{where}: [{section}]", body, allowed)
        sections[section] = dict(body)
    paths = sections.pop("paths")
    if base_dir:
        paths = {k: _resolve(base_dir, v) for k, v in paths.items()}
        if sections["filter"].get("blocklist_path"):
            sections["filter"]["blocklist_path"] = _resolve(base_dir, sections["filter"]["blocklist_path"])
    cfg = PipelineConfig(profiles=profiles, paths=paths, source=source, **sections)
    try:
        if "policy" in cfg.ctx:
            SelectionPolicy(cfg.ctx["policy"])
        if "drop_mode" in cfg.filter:
            DropMode(cfg.filter["drop_mode"])
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    return cfg


def _resolve(base_dir: Path, value: str) -> str:
    return value if Path(value).is_absolute() else str(base_dir / value)


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base_dir=path.parent, source=str(path))
