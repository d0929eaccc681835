"""Command-line front end: ``rpratlas {dkp, ik, atlas, verify, connect, multiplicity}``."""
from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import kinematics as kin
from . import regions, trajectory
from .kinematics import Geometry, Pose
from .octree import Octree

log = logging.getLogger("rpratlas")


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# config

@dataclass(frozen=True)
class RunConfig:
    geometry: Geometry = field(default_factory=Geometry)
    depth: int = 7
    tol_dkp: float | None = None
    tol_pose_xy: float | None = None
    tol_pose_phi: float | None = None
    coincidence_tol: float = 0.05
    detA_margin: float | None = None
    out: str = "atlas_out"
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.depth, int) or not 3 <= self.depth <= 12:
            raise ConfigError("depth must be an integer in [3, 12]")
        for name in ("tol_dkp", "tol_pose_xy", "tol_pose_phi", "detA_margin"):
            v = getattr(self, name)
            if v is not None and not (math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.coincidence_tol < 1.0:
            raise ConfigError("coincidence_tol must lie in (0, 1)")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")

    def atlas_config(self) -> regions.AtlasConfig:
        return regions.AtlasConfig(depth=self.depth, coincidence_tol=self.coincidence_tol)

    @property
    def tol_pose(self):
        g = self.geometry
        if self.tol_pose_xy is None and self.tol_pose_phi is None:
            return None
        return (
            g.tol_pose_xy if self.tol_pose_xy is None else self.tol_pose_xy,
            g.tol_pose_phi if self.tol_pose_phi is None else self.tol_pose_phi,
        )


_GEOM_KEYS = {
    "geometry.a1.x": ("a1", 0), "geometry.a1.y": ("a1", 1),
    "geometry.a2.x": ("a2", 0), "geometry.a2.y": ("a2", 1),
    "geometry.a3.x": ("a3", 0), "geometry.a3.y": ("a3", 1),
    "geometry.l2": ("l2", None), "geometry.l3": ("l3", None),
    "geometry.theta": ("theta", None),
    "geometry.rho_min.1": ("rho_min", 0), "geometry.rho_min.2": ("rho_min", 1),
    "geometry.rho_min.3": ("rho_min", 2),
    "geometry.rho_max.1": ("rho_max", 0), "geometry.rho_max.2": ("rho_max", 1),
    "geometry.rho_max.3": ("rho_max", 2),
}
_TOL_KEYS = {
    "tolerances.tol_dkp": "tol_dkp",
    "tolerances.tol_pose_xy": "tol_pose_xy",
    "tolerances.tol_pose_phi": "tol_pose_phi",
    "tolerances.coincidence_tol": "coincidence_tol",
    "tolerances.detA_margin": "detA_margin",
}


def _parse_float(key: str, text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ConfigError(f"{key}: not a number: {text!r}") from None
    if not math.isfinite(v):
        raise ConfigError(f"{key}: non-finite value")
    return v


def _parse_int(key: str, text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"{key}: not an integer: {text!r}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Read flat ``dotted.key = value`` lines; ``auto`` restores a default."""
    base = base or RunConfig()
    geo = {f.name: getattr(base.geometry, f.name) for f in fields(Geometry)}
    geo = {k: list(v) if isinstance(v, tuple) else v for k, v in geo.items()}
    top = {f.name: getattr(base, f.name) for f in fields(RunConfig) if f.name != "geometry"}
    seen = set()
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {n}: duplicate key {key}")
        seen.add(key)
        if key in _GEOM_KEYS:
            name, idx = _GEOM_KEYS[key]
            v = _parse_float(key, val)
            if idx is None:
                geo[name] = v
            else:
                geo[name][idx] = v
        elif key in _TOL_KEYS:
            name = _TOL_KEYS[key]
            if val == "auto":
                top[name] = getattr(RunConfig(), name)
            else:
                top[name] = _parse_float(key, val)
        elif key == "depth":
            top["depth"] = _parse_int(key, val)
        elif key == "seed":
            top["seed"] = _parse_int(key, val)
        elif key == "output.dir":
            top["out"] = val
        else:
            raise ConfigError(f"line {n}: unknown key {key}")
    try:
        g = Geometry(**{k: tuple(v) if isinstance(v, list) else v for k, v in geo.items()})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(geometry=g, **top)


def format_config(cfg: RunConfig) -> str:
    """Effective configuration; floats are written round-trip exact."""
    g = cfg.geometry
    lines = []
    for key, (name, idx) in _GEOM_KEYS.items():
        v = getattr(g, name)
        lines.append(f"{key} = {float(v if idx is None else v[idx])!r}")
    lines.append(f"depth = {cfg.depth}")
    for key, name in _TOL_KEYS.items():
        v = getattr(cfg, name)
        lines.append(f"{key} = {'auto' if v is None else repr(float(v))}")
    lines.append(f"output.dir = {cfg.out}")
    lines.append(f"seed = {cfg.seed}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# exports

def _fmt(v: float) -> str:
    return f"{v:.9g}"


def export_family(parts: list[Octree], labels: list[int]) -> str:
    """Voxel records of several octrees, each leaf tagged with its part label."""
    cs, ss, ls = [], [], []
    for o, lab in zip(parts, labels):
        lvl, code = o.leaves()
        if len(lvl) == 0:
            continue
        lo, hi = o.cell_bounds(lvl, code)
        cs.append(0.5 * (lo + hi))
        ss.append(hi[:, 0] - lo[:, 0])
        ls.append(np.full(len(lvl), lab, dtype=np.int64))
    if not cs:
        return ""
    c = np.concatenate(cs)
    s = np.concatenate(ss)
    lab = np.concatenate(ls)
    order = np.lexsort((lab, c[:, 2], c[:, 1], c[:, 0]))
    return "".join(
        f"{_fmt(c[i, 0])} {_fmt(c[i, 1])} {_fmt(c[i, 2])} {_fmt(s[i])} {lab[i]}\n" for i in order
    )


SUMMARY_HEADER = "kind,id,aspect,volume,cells,sign,multiplicity\n"


def _row(kind, id_, aspect, o: Octree | None, sign="", mult="", volume=None, cells=None) -> str:
    vol = o.volume() if volume is None else volume
    n = o.n_voxels if cells is None else cells
    return f"{kind},{id_},{aspect},{_fmt(vol)},{n},{sign},{mult}\n"


def summary_csv(atlas: regions.RegionAtlas) -> str:
    out = [SUMMARY_HEADER]
    out.append(_row("workspace", 0, "", atlas.workspace))
    out.append(_row("joint_space", 0, "", atlas.joint_space))
    out.append(_row("singular_set", 0, "", atlas.singular_set))
    for a in atlas.aspects:
        out.append(_row("aspect", a.id, a.id, a.octree, sign=a.sign))
    for c in atlas.joint_cells:
        out.append(_row("joint_cell", c["id"], "", None, mult=c["count"], volume=c["volume"], cells=c["voxels"]))
    for a_id, o in sorted(atlas.characteristic.items()):
        out.append(_row("characteristic", a_id, a_id, o, sign=atlas.aspects[a_id].sign))
    for a_id, o in sorted(atlas.region_fragments.items()):
        out.append(_row("region_fragments", a_id, a_id, o, sign=atlas.aspects[a_id].sign))
    for r in atlas.basic_regions:
        cls = atlas.class_of_region(r.id)
        out.append(_row("basic_region", r.id, r.aspect, r.octree, sign=atlas.aspects[r.aspect].sign,
                        mult=cls.multiplicity if cls else ""))
    for r, o in zip(atlas.basic_regions, atlas.basic_components):
        cls = atlas.class_of_region(r.id)
        out.append(_row("basic_component", r.id, r.aspect, o, sign=atlas.aspects[r.aspect].sign,
                        mult=cls.multiplicity if cls else ""))
    for c in atlas.coincidence_classes:
        img = atlas.basic_components[c.members[0]]
        out.append(_row("coincidence_class", c.id, "", img, mult=c.multiplicity))
    for d in atlas.uniqueness_domains:
        out.append(_row("uniqueness_domain", d.id, d.aspect, d.octree, sign=atlas.aspects[d.aspect].sign))
    return "".join(out)


def write_atlas(atlas: regions.RegionAtlas, cfg: RunConfig, out: Path) -> list[Path]:
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    files: dict[str, str] = {
        "config.cfg": format_config(cfg),
        "summary.csv": summary_csv(atlas),
        "workspace.vox": export_family([atlas.workspace], [0]),
        "joint_space.vox": export_family([atlas.joint_space], [0]),
        "singular_set.vox": export_family([atlas.singular_set], [0]),
        "aspects.vox": export_family([a.octree for a in atlas.aspects], [a.id for a in atlas.aspects]),
        "characteristic.vox": export_family(
            [o for _, o in sorted(atlas.characteristic.items())], sorted(atlas.characteristic)
        ),
        "basic_regions.vox": export_family(
            [r.octree for r in atlas.basic_regions], [r.id for r in atlas.basic_regions]
        ),
        "basic_components.vox": export_family(
            atlas.basic_components, [r.id for r in atlas.basic_regions]
        ),
        "uniqueness_domains.vox": export_family(
            [d.octree for d in atlas.uniqueness_domains], [d.id for d in atlas.uniqueness_domains]
        ),
    }
    cls_lines = ["class,multiplicity,joint_cell,members\n"]
    for c in atlas.coincidence_classes:
        cls_lines.append(f"{c.id},{c.multiplicity},{c.joint_cell},{' '.join(map(str, c.members))}\n")
    files["coincidence_classes.csv"] = "".join(cls_lines)
    dom_lines = ["domain,aspect,regions\n"]
    for d in atlas.uniqueness_domains:
        dom_lines.append(f"{d.id},{d.aspect},{' '.join(map(str, d.regions))}\n")
    files["uniqueness_domains.csv"] = "".join(dom_lines)
    written = []
    for name, text in files.items():
        p = out / name
        try:
            p.write_text(text, encoding="ascii", newline="\n")
        except OSError as exc:
            raise ConfigError(f"cannot write {p}: {exc}") from None
        written.append(p)
    return written


def atlas_digest(atlas: regions.RegionAtlas) -> dict:
    counts = {}
    for c in atlas.coincidence_classes:
        counts[c.multiplicity] = counts.get(c.multiplicity, 0) + 1
    return {
        "aspects": len(atlas.aspects),
        "joint_cells": len(atlas.joint_cells),
        "basic_regions": len(atlas.basic_regions),
        "raw_region_components": atlas.raw_region_count,
        "coincidence_classes": len(atlas.coincidence_classes),
        "class_multiplicities": " ".join(f"{k}x{v}" for k, v in sorted(counts.items())),
        "ambiguous_pairs": len(atlas.ambiguous_pairs),
        "uniqueness_domains": len(atlas.uniqueness_domains),
    }


# --------------------------------------------------------------------------
# commands

def _load_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        cfg = parse_config(text)
    over = {}
    if getattr(args, "depth", None) is not None:
        over["depth"] = args.depth
    if getattr(args, "out", None) is not None:
        over["out"] = args.out
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    return replace(cfg, **over) if over else cfg


def _floats(vals, n, what):
    if len(vals) != n:
        raise ConfigError(f"{what}: expected {n} numbers")
    return [_parse_float(what, v) for v in vals]


def cmd_dkp(args, cfg: RunConfig) -> int:
    q = _floats(args.q, 3, "joint vector")
    g = cfg.geometry
    try:
        sols = kin.solve_dkp(g, q, tol_dkp=cfg.tol_dkp, tol_pose=cfg.tol_pose)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(f"# q = ({q[0]:.9g}, {q[1]:.9g}, {q[2]:.9g})  solutions: {len(sols)}")
    print(f"{'':>2} {'x':>9} {'y':>9} {'phi (rad)':>9}  {'|F|':>9} {'sign':>4}")
    for i, X in enumerate(sols, 1):
        res = float(np.max(np.abs(kin.residual(g, q, X))))
        sg = int(np.sign(kin.det_a(g, X)))
        print(f"{i:>2} {X.x:9.3f} {X.y:9.3f} {X.phi:9.3f}  {res:9.2e} {sg:+4d}")
    return 0


def cmd_ik(args, cfg: RunConfig) -> int:
    x, y, phi = _floats(args.pose, 3, "pose")
    g = cfg.geometry
    q = kin.inverse_kinematics(g, Pose(x, y, phi))
    print(f"rho: {_fmt(q.rho1)} {_fmt(q.rho2)} {_fmt(q.rho3)}")
    print(f"within_limits: {'true' if kin.within_limits(g, q) else 'false'}")
    print(f"det_a: {_fmt(kin.det_a(g, Pose(x, y, phi)))}")
    return 0


def cmd_atlas(args, cfg: RunConfig) -> int:
    atlas = regions.build_atlas(cfg.geometry, cfg.atlas_config())
    write_atlas(atlas, cfg, Path(cfg.out))
    for k, v in atlas_digest(atlas).items():
        print(f"{k}: {v}")
    return 0


def _step(args, cfg):
    return args.step if getattr(args, "step", None) else trajectory.default_step(cfg.geometry, cfg.depth)


def cmd_verify(args, cfg: RunConfig) -> int:
    try:
        text = Path(args.path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {args.path}: {exc}") from None
    p = trajectory.path_from_csv(text, _step(args, cfg))
    rep = trajectory.verify_path(cfg.geometry, p, cfg.detA_margin)
    sys.stdout.write(rep.as_text())
    return 0 if rep.valid else 1


def cmd_connect(args, cfg: RunConfig) -> int:
    vals = _floats(args.poses, 6, "poses")
    a, b = Pose(*vals[:3]), Pose(*vals[3:])
    g = cfg.geometry
    atlas = regions.build_atlas(g, cfg.atlas_config(), stage="aspects")
    p = trajectory.find_mode_change_path(atlas, g, a, b, margin=cfg.detA_margin, step=_step(args, cfg))
    if p is None:
        print("result: absent (different aspects)")
        return 1
    rep = trajectory.verify_path(g, p, cfg.detA_margin)
    text = trajectory.path_to_csv(p)
    if args.path_out:
        Path(args.path_out).write_text(text)
        print("result: found")
        sys.stdout.write(rep.as_text())
    else:
        sys.stdout.write(text)
    return 0 if rep.valid else 1


def cmd_multiplicity(args, cfg: RunConfig) -> int:
    g = cfg.geometry
    atlas = regions.build_atlas(g, cfg.atlas_config(), stage="components")
    res = regions.dkp_multiplicity_map(atlas, g, samples=args.samples, seed=cfg.seed)
    print(f"samples: {res['samples']}")
    for k, v in sorted(res["histogram"].items()):
        print(f"count_{k}: {v}")
    if "class_checked" in res:
        print(f"class_checked: {res['class_checked']}")
        print(f"class_agree: {res['class_agree']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--depth", type=int, metavar="N")
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--seed", type=int, metavar="N")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="rpratlas", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)
    s = sub.add_parser("dkp", parents=[common], help="direct kinematics of a joint vector")
    s.add_argument("q", nargs="*", metavar="RHO")
    s = sub.add_parser("ik", parents=[common], help="inverse kinematics of a pose")
    s.add_argument("pose", nargs="*", metavar="X_Y_PHI")
    sub.add_parser("atlas", parents=[common], help="build and export the region atlas")
    s = sub.add_parser("verify", parents=[common], help="verify a path CSV (x,y,phi rows)")
    s.add_argument("path")
    s.add_argument("--step", type=float)
    s = sub.add_parser("connect", parents=[common], help="non-singular path between two poses")
    s.add_argument("poses", nargs="*", metavar="X_Y_PHI")
    s.add_argument("--step", type=float)
    s.add_argument("--path-out", metavar="FILE")
    s = sub.add_parser("multiplicity", parents=[common], help="DKP count statistics over Q")
    s.add_argument("--samples", type=int, default=2000)
    return p


COMMANDS = {
    "dkp": cmd_dkp,
    "ik": cmd_ik,
    "atlas": cmd_atlas,
    "verify": cmd_verify,
    "connect": cmd_connect,
    "multiplicity": cmd_multiplicity,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _load_config(args)
        return COMMANDS[args.cmd](args, cfg)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
