"""Command-line entry point: ``dymesh <command> [options]``.

Configuration precedence is defaults < ``--config`` file < flags. Config
keys are namespaced (``vae.hidden_dim``, ``flow.steps``, ``train.lr``,
``filter.max_face_ratio``, ``slice.windows``, ``recon.orientation``). Every
command logs its fully resolved configuration to stderr before running.
Exit status is 0 when nothing failed, 1 when at least one record or input
failed, and 2 for usage errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import selftest
from .config import dump_kv, from_mapping, load_kv, to_mapping
from .dataset import (FilterRule, ManifestError, SliceConfig, discover_sources, process, read_manifest,
                      write_manifest)
from .formats import FormatError, TopologyError, read_dms, read_mesh, read_sequence, read_temb, write_dms
from .mesh import edge_set
from .metrics import DEFAULT_TAUS, evaluate
from .sgtt import SGTT, SgttConfig, generate_animation
from .tensor import Rng
from .topology import hop_bands, one_hop, weighted_adjacency
from .training import TrainConfig, flow_items, load_model, save_model, train_flow, train_vae
from .vae import DyMeshVAE, VaeConfig, make_item, reconstruct

log = logging.getLogger("dymesh")

SECTIONS = {"vae": VaeConfig, "flow": SgttConfig, "train": TrainConfig, "filter": FilterRule, "slice": SliceConfig}
EXTRA_KEYS = {"recon.orientation": "prose-decay"}
INPUT_ERRORS = (FormatError, TopologyError, ManifestError, ValueError, KeyError, OSError)


class CliError(Exception):
    """Fatal error for the whole command; the message names the offending file."""


# -- configuration ------------------------------------------------------------------

def _split(mapping: dict[str, str]) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {name: {} for name in SECTIONS}
    out["extra"] = {}
    for key, value in mapping.items():
        section, _, field = key.partition(".")
        if section in SECTIONS and field:
            names = {f.name for f in dataclasses.fields(SECTIONS[section])}
            if field not in names:
                raise CliError(f"unknown config key {key!r}")
            out[section][field] = value
        elif key in EXTRA_KEYS:
            out["extra"][key] = value
        else:
            raise CliError(f"unknown config key {key!r}")
    return out


def _ints(value) -> tuple[int, ...]:
    if isinstance(value, str):
        return tuple(int(v) for v in value.replace(" ", "").split(",") if v)
    return tuple(int(v) for v in value)


def _build(section: str, values: dict[str, str]):
    cls = SECTIONS[section]
    if section == "slice":
        kw = dict(values)
        for key in ("windows", "strides"):
            if key in kw:
                kw[key] = _ints(kw[key])
        if "keep_reversed" in kw:
            kw["keep_reversed"] = str(kw["keep_reversed"]).lower() in ("1", "true", "yes", "on")
        return cls(**kw)
    return from_mapping(cls, values, strict=True)


class Resolved:
    """Typed configuration for one run."""

    def __init__(self, args: argparse.Namespace, overrides: dict[str, str]):
        raw = load_kv(args.config) if args.config else {}
        raw.update(overrides)
        parts = _split(raw)
        # the global seed seeds every section that has not been pinned explicitly
        for section in ("vae", "flow", "train"):
            parts[section].setdefault("seed", str(args.seed))
        try:
            self.vae = _build("vae", parts["vae"])
            self.flow = _build("flow", parts["flow"])
            self.train = _build("train", parts["train"])
            self.filter = _build("filter", parts["filter"])
            self.slice = _build("slice", parts["slice"])
        except (ValueError, TypeError) as exc:
            raise CliError(f"{args.config or '<flags>'}: invalid configuration: {exc}") from None
        self.extra = {**EXTRA_KEYS, **parts["extra"]}
        self.seed = args.seed
        self.threads = args.threads

    def flat(self) -> dict[str, str]:
        out = {"seed": str(self.seed), "threads": str(self.threads)}
        for section in SECTIONS:
            for k, v in to_mapping(getattr(self, section)).items():
                out[f"{section}.{k}"] = v
        out.update(self.extra)
        return out


def _log_config(cfg: Resolved, command: str) -> None:
    log.info("command %s", command)
    for line in dump_kv(cfg.flat()).splitlines():
        log.info("config %s", line)


# -- commands --------------------------------------------------------------------------

def _emit(rows: list[list[str]]) -> None:
    for row in rows:
        print("\t".join(row))


def cmd_ingest(args, cfg: Resolved) -> int:
    manifest = Path(args.manifest)
    out_dir = Path(args.out_dir) if args.out_dir else manifest.with_name(manifest.stem + "_data")
    try:
        sources = discover_sources(args.src)
    except FileNotFoundError:
        raise CliError(f"{args.src}: no such file or directory") from None
    records, errors = process(sources, out_dir, cfg.filter, cfg.slice, cfg.threads)
    write_manifest(records, manifest)
    accepted = sum(r.accepted for r in records)
    print(f"sources\t{len(sources)}\nfailed\t{len(errors)}\nrecords\t{len(records)}\naccepted\t{accepted}")
    for err in errors:
        print(f"error\t{err}", file=sys.stderr)
    return 1 if errors else 0


def _describe(values: list[int]) -> list[str]:
    if not values:
        return ["0", "", "", "", ""]
    a = np.asarray(values, dtype=np.float64)
    return [str(len(a)), f"{a.min():g}", f"{np.median(a):g}", f"{a.mean():.4g}", f"{a.max():g}"]


def cmd_stats(args, cfg: Resolved) -> int:
    records = _load_manifest(args.manifest)
    acc = [r for r in records if r.accepted]
    failed = 0
    edges = []
    for r in acc:
        try:
            edges.append(len(edge_set(read_dms(r.path).faces)))
        except INPUT_ERRORS as exc:
            print(f"error\t{r.id}\t{r.path}: {exc}", file=sys.stderr)
            failed += 1
    rows = [["quantity", "count", "min", "median", "mean", "max"]]
    rows.append(["frames"] + _describe([r.frames for r in acc]))
    rows.append(["vertices"] + _describe([r.vertices for r in acc]))
    rows.append(["faces"] + _describe([r.faces for r in acc]))
    rows.append(["edges"] + _describe(edges))
    _emit(rows)
    print()
    reasons: dict[str, int] = {}
    for r in records:
        key = "accepted" if r.accepted else r.reason or "rejected"
        reasons[key] = reasons.get(key, 0) + 1
    _emit([["decision", "records"]] + [[k, str(v)] for k, v in sorted(reasons.items())])
    print()
    windows: dict[tuple[int, bool], int] = {}
    for r in acc:
        windows[(r.window, r.reversed)] = windows.get((r.window, r.reversed), 0) + 1
    _emit([["window", "reversed", "slices"]] + [[str(w), str(int(rv)), str(n)] for (w, rv), n in sorted(windows.items())])
    return 1 if failed else 0


def cmd_topo(args, cfg: Resolved) -> int:
    try:
        mesh = read_mesh(args.mesh)
    except INPUT_ERRORS as exc:
        raise CliError(f"{args.mesh}: {exc}") from None
    bands = hop_bands(one_hop(mesh), args.L)
    adj = weighted_adjacency(bands, args.gamma)
    rows = [["band", "pairs", "weight"]]
    rows += [[str(l), str(b.nnz), f"{args.gamma ** l:g}"] for l, b in enumerate(bands.bands)]
    _emit(rows)
    n = mesh.n_vertices
    mask = adj.log_mask(cfg.vae.mask_floor) if n else np.zeros((0, 0))
    density = adj.indices.size / (n * n) if n else 0.0
    print()
    _emit([["vertices", str(n)], ["faces", str(mesh.n_faces)], ["reach_pairs", str(bands.reach.nnz)],
           ["density", f"{density:.6g}"],
           ["mask_min", f"{mask.min():.6g}" if n else ""], ["mask_max", f"{mask.max():.6g}" if n else ""]])
    return 0


def _load_manifest(path) -> list:
    try:
        return read_manifest(path)
    except (ManifestError, OSError) as exc:
        raise CliError(str(exc)) from None


def _load(path, kind):
    try:
        return load_model(path, kind)
    except INPUT_ERRORS as exc:
        raise CliError(f"{path}: {exc}") from None


def _run_records(records, fn, threads: int):
    """Apply ``fn`` to each record (in parallel when asked); keeps manifest order."""
    def safe(rec):
        try:
            return fn(rec), None
        except INPUT_ERRORS as exc:
            return None, f"{rec.id}\t{rec.path}: {exc}"
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(safe, records))
    return [safe(r) for r in records]


def cmd_recon(args, cfg: Resolved) -> int:
    records = [r for r in _load_manifest(args.manifest) if r.accepted]
    vae = _load(args.vae_ckpt, "vae")
    orientation = cfg.extra["recon.orientation"]

    def one(rec):
        seq = read_dms(rec.path)
        return evaluate(reconstruct(vae, seq, orientation), seq, DEFAULT_TAUS)

    results = _run_records(records, one, cfg.threads)
    header = None
    rows, reports, failed = [], [], 0
    for rec, (report, err) in zip(records, results):
        if err:
            print(f"error\t{err}", file=sys.stderr)
            failed += 1
            continue
        header = header or ["id"] + report.header()
        rows.append([rec.id] + report.row())
        reports.append(report)
    if header:
        agg = ["mean", f"{np.mean([r.ave for r in reports]):.6g}"]
        agg += [f"{np.mean([r.rho_abn[t] for r in reports]):.6g}" for t in sorted(reports[0].rho_abn)]
        agg.append(f"{np.mean([r.amd for r in reports if r.amd is not None]):.6g}")
        _emit([header] + rows + [agg])
    return 1 if failed else 0


def _training_items(records, vcfg: VaeConfig):
    items, texts, failed = [], [], 0
    for rec in records:
        try:
            seq = read_dms(rec.path)
            items.append(make_item(seq, vcfg))
            temb = Path(rec.caption).with_suffix(".temb") if rec.caption else None
            texts.append(read_temb(temb) if temb is not None and temb.is_file() else None)
        except INPUT_ERRORS as exc:
            print(f"error\t{rec.id}\t{rec.path}: {exc}", file=sys.stderr)
            failed += 1
    return items, texts, failed


def _report_training(hist) -> None:
    final = f"{hist.losses[-1]:.6g}" if hist.losses else ""
    print(f"steps\t{len(hist.losses)}\nfinal_loss\t{final}\nseconds\t{hist.seconds:.1f}")


def cmd_train_vae(args, cfg: Resolved) -> int:
    records = [r for r in _load_manifest(args.manifest) if r.accepted]
    items, _, failed = _training_items(records, cfg.vae)
    if not items:
        raise CliError(f"{args.manifest}: no usable training records")
    model = DyMeshVAE(cfg.vae)
    hist = train_vae(model, items, cfg.train)
    save_model(model, args.out)
    _report_training(hist)
    return 1 if failed else 0


def cmd_train_flow(args, cfg: Resolved) -> int:
    records = [r for r in _load_manifest(args.manifest) if r.accepted]
    vae = _load(args.vae_ckpt, "vae")
    items, texts, failed = _training_items(records, vae.cfg)
    if not items:
        raise CliError(f"{args.manifest}: no usable training records")
    dims = {t.shape[-1] for t in texts if t is not None}
    if len(dims) > 1:
        raise CliError(f"{args.manifest}: text embeddings have mixed widths {sorted(dims)}")
    flow_cfg = dataclasses.replace(cfg.flow, shape_dim=vae.cfg.hidden_dim, latent_dim=vae.cfg.latent_dim,
                                   text_dim=dims.pop() if dims else cfg.flow.text_dim)
    model = SGTT(flow_cfg)
    hist = train_flow(model, flow_items(vae, items, texts), cfg.train)
    save_model(model, args.out)
    _report_training(hist)
    return 1 if failed else 0


def cmd_animate(args, cfg: Resolved) -> int:
    try:
        mesh = read_mesh(args.mesh)
        text = read_temb(args.temb)
    except INPUT_ERRORS as exc:
        raise CliError(str(exc)) from None
    vae, flow = _load(args.vae_ckpt, "vae"), _load(args.flow_ckpt, "flow")
    text = text if len(text) else None
    if text is not None and text.shape[-1] != flow.cfg.text_dim:
        raise CliError(f"{args.temb}: embedding width {text.shape[-1]} != model text width {flow.cfg.text_dim}")
    steps = args.steps if args.steps is not None else flow.cfg.steps
    guidance = args.cfg if args.cfg is not None else flow.cfg.guidance
    log.info("sampling with seed %d, %d steps, guidance %g", args.seed, steps, guidance)
    try:
        seq = generate_animation(mesh, text, args.frames, vae, flow, Rng(args.seed), steps, guidance,
                                 cfg.extra["recon.orientation"])
    except ValueError as exc:
        raise CliError(f"{args.mesh}: {exc}") from None
    write_dms(seq, args.out)
    print(f"wrote\t{args.out}\nframes\t{seq.n_frames}\nvertices\t{seq.n_vertices}\nseed\t{args.seed}")
    return 0


def cmd_metrics(args, cfg: Resolved) -> int:
    try:
        recon = read_sequence(args.recon)
        ref_path = Path(args.reference)
        ref = read_mesh(ref_path) if ref_path.suffix.lower() == ".obj" else read_sequence(ref_path)
        report = evaluate(recon, ref, DEFAULT_TAUS)
    except INPUT_ERRORS as exc:
        raise CliError(f"{args.recon} vs {args.reference}: {exc}") from None
    _emit([["sequence"] + report.header(), [str(args.recon)] + report.row(), ["mean"] + report.row()])
    return 0


def cmd_selftest(args, cfg: Resolved) -> int:
    return 1 if selftest.run_all() else 0


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--config", help="key=value file overriding defaults")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="single config override; takes precedence over --config")
    common.add_argument("--threads", type=int, default=1, help="parallel files or records")
    common.add_argument("--log-level", default="INFO")

    p = argparse.ArgumentParser(prog="dymesh", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help_text):
        sp = sub.add_parser(name, parents=[common], help=help_text)
        sp.set_defaults(func=fn)
        return sp

    sp = add("ingest", cmd_ingest, "ingest, filter, slice and augment sources into a manifest")
    sp.add_argument("src")
    sp.add_argument("manifest")
    sp.add_argument("--out-dir", help="where slice containers go (default: <manifest>_data)")

    sp = add("stats", cmd_stats, "frame, vertex, face and edge distributions")
    sp.add_argument("manifest")

    sp = add("topo", cmd_topo, "hop band sizes and mask statistics for one mesh")
    sp.add_argument("mesh")
    sp.add_argument("--L", type=int, default=4)
    sp.add_argument("--gamma", type=float, default=0.5)

    sp = add("recon", cmd_recon, "encode/decode round trip with per-sequence metrics")
    sp.add_argument("manifest")
    sp.add_argument("vae_ckpt")

    sp = add("train-vae", cmd_train_vae, "train the sequence autoencoder")
    sp.add_argument("manifest")
    sp.add_argument("out")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)

    sp = add("train-flow", cmd_train_flow, "train the trajectory generator on encoded latents")
    sp.add_argument("manifest")
    sp.add_argument("vae_ckpt")
    sp.add_argument("out")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)

    sp = add("animate", cmd_animate, "generate an animation for a static mesh")
    sp.add_argument("mesh")
    sp.add_argument("temb")
    sp.add_argument("vae_ckpt")
    sp.add_argument("flow_ckpt")
    sp.add_argument("--frames", type=int, default=16)
    sp.add_argument("--cfg", type=float, help="guidance scale")
    sp.add_argument("--steps", type=int, help="sampler steps")
    sp.add_argument("-o", "--out", default="animation.dms")

    sp = add("metrics", cmd_metrics, "AVE, anomalous edge ratios and AMD for one pair")
    sp.add_argument("recon")
    sp.add_argument("reference", help="reference .dms sequence, or a mesh for generation mode")

    add("selftest", cmd_selftest, "run the built-in oracle checks")
    return p


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise CliError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    # dedicated flags win over --set and the config file
    if args.command in ("train-vae", "train-flow"):
        if args.steps is not None:
            out["train.steps"] = str(args.steps)
        if args.lr is not None:
            out["train.lr"] = str(args.lr)
    return out


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        cfg = Resolved(args, _overrides(args))
        _log_config(cfg, args.command)
        return args.func(args, cfg)
    except CliError as exc:
        print(f"dymesh {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
