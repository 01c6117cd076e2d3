"""INI configuration with a fixed schema.

Every key lives in one section and maps onto one :class:`PipelineConfig`
field. Unknown sections or keys and out-of-range values are rejected with
the offending line number.

Schema (section, key, type, constraint)::

    [run]       seed int >=0; out path
    [scene]     n_keyframes int >=2; orbit_x, orbit_y, camera_height float >0
    [noise]     sigma_flow float >0; masks "x,y,w,h; ..."; mask_inflation float >=10;
                textureless_surfaces "id, ..."; outlier_fraction float in [0,1);
                outlier_flow float >=0; pose_noise_rot, pose_noise_trans,
                depth_noise float >=0
    [ba]        width, height int >=2; hfov float in (0,180); window int >=1;
                damping float >0; iterations int >=1; schedule adaptive|fixed;
                gauge "i, ..." (must include 0)
    [upsample]  factor int >=1; weights bilinear|onehot
    [fusion]    weight_mode inv-sigma|inv-var|constant; truncation, voxel_size float >0;
                filter none|droid; filter_threshold float >0; filter_min_support int >=1
    [mesh]      u_max float >0 or inf; u_max_sweep "u, ..."
    [eval]      density float >0; max_dist float >0; icp bool
"""

from __future__ import annotations

import configparser
import math
from dataclasses import fields
from pathlib import Path

from .errors import ConfigError
from .pipeline import PipelineConfig


def _float(s: str) -> float:
    return float(s)


def _int(s: str) -> int:
    return int(s)


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _int_list(s: str) -> tuple:
    return tuple(int(x) for x in s.replace(";", ",").split(",") if x.strip())


def _float_list(s: str) -> tuple:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _masks(s: str) -> tuple:
    out = []
    for chunk in s.split(";"):
        if not chunk.strip():
            continue
        vals = tuple(int(x) for x in chunk.split(","))
        if len(vals) != 4:
            raise ValueError(f"mask needs x,y,w,h: {chunk.strip()!r}")
        out.append(vals)
    return tuple(out)


def _choice(*options):
    def parse(s: str) -> str:
        v = s.strip().lower()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {s!r}")
        return v

    return parse


def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


# (section, key) -> (field name, parser, check, description of the check)
SCHEMA = {
    ("run", "seed"): ("seed", _int, _nonneg, ">= 0"),
    ("run", "out"): ("out", str, None, None),
    ("scene", "n_keyframes"): ("n_keyframes", _int, lambda x: x >= 2, ">= 2"),
    ("scene", "orbit_x"): ("orbit_x", _float, _pos, "> 0"),
    ("scene", "orbit_y"): ("orbit_y", _float, _pos, "> 0"),
    ("scene", "camera_height"): ("camera_height", _float, _pos, "> 0"),
    ("noise", "sigma_flow"): ("sigma_flow", _float, _pos, "> 0"),
    ("noise", "masks"): ("masks", _masks, None, None),
    ("noise", "mask_inflation"): ("mask_inflation", _float, lambda x: x >= 10, ">= 10"),
    ("noise", "textureless_surfaces"): ("textureless_surfaces", _int_list, None, None),
    ("noise", "outlier_fraction"): ("outlier_fraction", _float, lambda x: 0 <= x < 1, "in [0, 1)"),
    ("noise", "outlier_flow"): ("outlier_flow", _float, _nonneg, ">= 0"),
    ("noise", "pose_noise_rot"): ("pose_noise_rot", _float, _nonneg, ">= 0"),
    ("noise", "pose_noise_trans"): ("pose_noise_trans", _float, _nonneg, ">= 0"),
    ("noise", "depth_noise"): ("depth_noise", _float, _nonneg, ">= 0"),
    ("ba", "width"): ("width", _int, lambda x: x >= 2, ">= 2"),
    ("ba", "height"): ("height", _int, lambda x: x >= 2, ">= 2"),
    ("ba", "hfov"): ("hfov", _float, lambda x: 0 < x < 180, "in (0, 180)"),
    ("ba", "window"): ("window", _int, lambda x: x >= 1, ">= 1"),
    ("ba", "damping"): ("damping", _float, _pos, "> 0"),
    ("ba", "iterations"): ("iterations", _int, lambda x: x >= 1, ">= 1"),
    ("ba", "schedule"): ("schedule", _choice("adaptive", "fixed"), None, None),
    ("ba", "gauge"): ("gauge", _int_list, lambda g: 0 in g, "must include 0"),
    ("upsample", "factor"): ("upsample_factor", _int, lambda x: x >= 1, ">= 1"),
    ("upsample", "weights"): ("upsample_weights", _choice("bilinear", "onehot"), None, None),
    ("fusion", "weight_mode"): ("weight_mode", _choice("inv-sigma", "inv-var", "constant"), None, None),
    ("fusion", "truncation"): ("truncation", _float, _pos, "> 0"),
    ("fusion", "voxel_size"): ("voxel_size", _float, _pos, "> 0"),
    ("fusion", "filter"): ("filter", _choice("none", "droid"), None, None),
    ("fusion", "filter_threshold"): ("filter_threshold", _float, _pos, "> 0"),
    ("fusion", "filter_min_support"): ("filter_min_support", _int, lambda x: x >= 1, ">= 1"),
    ("mesh", "u_max"): ("u_max", _float, _pos, "> 0 (inf allowed)"),
    ("mesh", "u_max_sweep"): ("u_max_sweep", _float_list, lambda xs: all(x > 0 for x in xs), "all > 0"),
    ("eval", "density"): ("eval_density", _float, _pos, "> 0"),
    ("eval", "max_dist"): ("max_dist", _float, _pos, "> 0"),
    ("eval", "icp"): ("icp", _bool, None, None),
}

FIELD_TO_KEY = {v[0]: k for k, v in SCHEMA.items()}


def _line_numbers(text: str) -> dict:
    """(section, key) -> 1-based line of its definition."""
    lines = {}
    section = None
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            lines[(section, None)] = n
        elif section is not None:
            for sep in ("=", ":"):
                if sep in line:
                    lines[(section, line.split(sep, 1)[0].strip().lower())] = n
                    break
    return lines


def parse_config(text: str, source: str = "<config>", base: PipelineConfig | None = None) -> PipelineConfig:
    """Parse INI text into a :class:`PipelineConfig` layered over ``base``.

    Raises:
        ConfigError: with ``source:line`` for every problem found.
    """
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        lineno = getattr(exc, "lineno", None)
        where = f"{source}:{lineno}" if lineno else source
        raise ConfigError(f"{where}: {exc.message if hasattr(exc, 'message') else exc}") from None
    lines = _line_numbers(text)
    known_sections = {s for s, _ in SCHEMA}
    problems = []
    values = {}
    for section in parser.sections():
        sec = section.lower()
        if sec not in known_sections:
            problems.append(f"{source}:{lines.get((sec, None), '?')}: unknown section [{section}]")
            continue
        for key, raw in parser.items(section):
            where = f"{source}:{lines.get((sec, key), '?')}"
            spec = SCHEMA.get((sec, key))
            if spec is None:
                problems.append(f"{where}: unknown key '{key}' in [{section}]")
                continue
            name, parse, check, desc = spec
            try:
                value = parse(raw)
            except ValueError as exc:
                problems.append(f"{where}: bad value for {sec}.{key}: {exc}")
                continue
            if check is not None and not check(value):
                problems.append(f"{where}: {sec}.{key} = {raw.strip()} must be {desc}")
                continue
            values[name] = value
    if problems:
        raise ConfigError("\n".join(problems))
    return (base or PipelineConfig()).with_overrides(**values)


def load_config(path, base: PipelineConfig | None = None) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path), base)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "inf" if math.isinf(value) else repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join(",".join(str(x) for x in m) for m in value)
        return ", ".join(_format(x) if isinstance(x, float) else str(x) for x in value)
    return str(value)


def dump_config(cfg: PipelineConfig) -> str:
    """INI text that :func:`parse_config` maps back to ``cfg``."""
    by_section: dict[str, list[str]] = {}
    for f in fields(cfg):
        sec, key = FIELD_TO_KEY[f.name]
        by_section.setdefault(sec, []).append(f"{key} = {_format(getattr(cfg, f.name))}")
    order = ["run", "scene", "noise", "ba", "upsample", "fusion", "mesh", "eval"]
    return "\n".join(f"[{s}]\n" + "\n".join(by_section[s]) + "\n" for s in order)
