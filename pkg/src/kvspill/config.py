"""Human-readable key/value config files for presets, models, and workloads.

All files use INI sections parsed with :mod:`configparser`. Disk presets
carry their bandwidth calibration points as a single ``curve`` value of
comma-separated ``block_bytes:fraction`` pairs.
"""

from __future__ import annotations

import configparser
from importlib import resources

from .errors import MalformedInputError
from .kvstore import DiskModel

BUNDLED_PRESETS = ("nvme", "emmc")


def _parse_curve(text: str) -> tuple[tuple[int, float], ...]:
    points = []
    for part in text.replace("\n", ",").split(","):
        part = part.strip()
        if not part:
            continue
        try:
            block, frac = part.split(":")
            points.append((int(block), float(frac)))
        except ValueError as exc:
            raise MalformedInputError(f"bad curve point {part!r}") from exc
    return tuple(points)


def _format_curve(curve) -> str:
    return ", ".join(f"{b}:{f:g}" for b, f in curve)


def disk_model_from_parser(cp: configparser.ConfigParser) -> DiskModel:
    if not cp.has_section("disk"):
        raise MalformedInputError("missing [disk] section")
    sec = cp["disk"]
    try:
        return DiskModel(
            name=sec.get("name", "custom"),
            peak_bandwidth=float(sec["peak_bandwidth"]),
            per_request_latency=float(sec["per_request_latency"]),
            curve=_parse_curve(sec["curve"]),
        )
    except (KeyError, ValueError) as exc:
        raise MalformedInputError(f"bad disk preset: {exc}") from exc


def load_disk_model(path) -> DiskModel:
    cp = configparser.ConfigParser()
    try:
        with open(path) as f:
            cp.read_file(f)
    except (OSError, configparser.Error) as exc:
        raise MalformedInputError(f"cannot parse {path}: {exc}") from exc
    return disk_model_from_parser(cp)


def save_disk_model(model: DiskModel, path) -> None:
    cp = configparser.ConfigParser()
    cp["disk"] = {
        "name": model.name,
        "peak_bandwidth": f"{model.peak_bandwidth:g}",
        "per_request_latency": f"{model.per_request_latency:g}",
        "curve": _format_curve(model.curve),
    }
    with open(path, "w") as f:
        cp.write(f)


def load_preset(name: str) -> DiskModel:
    """Load one of the bundled disk presets by name ("nvme", "emmc")."""
    if name not in BUNDLED_PRESETS:
        raise MalformedInputError(f"unknown preset {name!r}; bundled: {BUNDLED_PRESETS}")
    cp = configparser.ConfigParser()
    text = resources.files("kvspill").joinpath(f"presets/{name}.cfg").read_text()
    cp.read_string(text)
    return disk_model_from_parser(cp)


def read_sections(path, required=()) -> configparser.ConfigParser:
    """Parse an INI file, checking the required sections exist."""
    cp = configparser.ConfigParser()
    try:
        with open(path) as f:
            cp.read_file(f)
    except (OSError, configparser.Error) as exc:
        raise MalformedInputError(f"cannot parse {path}: {exc}") from exc
    for sec in required:
        if not cp.has_section(sec):
            raise MalformedInputError(f"{path}: missing [{sec}] section")
    return cp
