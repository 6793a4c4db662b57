"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration,
3 missing inputs. Failures print one JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, RunConfig, desk_preset, load_config
from .data import ManifestError

log = logging.getLogger("ropscreen")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3
_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")


def _images_under(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise FileNotFoundError(f"no such input: {path}")
    found = sorted(p for p in path.rglob("*") if p.suffix.lower() in _IMAGE_SUFFIXES)
    if not found:
        raise FileNotFoundError(f"no images under {path}")
    return found


def cmd_preprocess(cfg: RunConfig, args) -> dict:
    from .preprocess import preprocess_image, write_processed
    out = Path(args.out) if args.out else Path(cfg.run_dir) / "preprocessed"
    targets = {"structure": [cfg.preprocess.structure_size], "texture": [cfg.preprocess.texture_size],
               "both": [cfg.preprocess.structure_size, cfg.preprocess.texture_size]}[args.target]
    p = cfg.preprocess
    written = []
    for src in _images_under(Path(args.input)):
        raw = io.read_rgb(src)
        for t in targets:
            clean = preprocess_image(raw, t, source_id=str(src), threshold=p.threshold, gamma=p.gamma,
                                     clahe_clip=p.clahe_clip, clahe_tiles=tuple(p.clahe_tiles),
                                     clahe_mode=p.clahe_mode)
            written.append(str(write_processed(out / clean.resolution_tag, clean)))
    return {"written": len(written), "out": str(out)}


def cmd_vmap(cfg: RunConfig, args) -> dict:
    from .pipeline import vessel_config
    from .vesselness import compute_vmap
    out = Path(args.out) if args.out else Path(cfg.run_dir) / "vmaps"
    vcfg = vessel_config(cfg)
    n = 0
    for src in _images_under(Path(args.input)):
        rgb = io.read_rgb(src).astype(np.float64) / 255.0
        vm = compute_vmap(rgb, vcfg)
        io.write_map16(out / f"{src.stem}_vmap.png", vm.values)
        io.append_jsonl(out / "vmaps.jsonl", {"source": str(src), "file": f"{src.stem}_vmap.png",
                                              "scales": list(vcfg.scales), "beta": vcfg.beta, "c": vm.c_values})
        n += 1
    return {"written": n, "out": str(out)}


def cmd_synth(cfg: RunConfig, args) -> dict:
    from .synth import generate_cohort
    s = cfg.synth
    out = Path(args.out or cfg.data_root)
    if out.exists() and any(out.iterdir()):
        raise FileExistsError(f"{out} is not empty; refusing to overwrite")
    patients = generate_cohort(out, s.n_patients, tuple(s.mix), cfg.seed, tuple(s.size),
                               tuple(s.images_per_patient))
    return {"patients": len(patients), "images": sum(len(p.images) for p in patients), "out": str(out)}


def _run(cfg: RunConfig):
    from .pipeline import Run
    run = Run(cfg)
    run.root.mkdir(parents=True, exist_ok=True)
    run.save_config()
    return run


def cmd_split(cfg, args) -> dict:
    split = _run(cfg).make_split()
    return {"test": len(split.test_patients), "folds": [len(v) for _, v in split.folds]}


def cmd_train_structure(cfg, args) -> dict:
    return {"best_epochs": _run(cfg).train_structure(args.folds)}


def cmd_train_texture(cfg, args) -> dict:
    return {"best_epochs": _run(cfg).train_texture(args.folds)}


def cmd_cache_logits(cfg, args) -> dict:
    bundles = _run(cfg).cache_logits()
    return {"oof": sum(b["role"] == "oof" for b in bundles), "test": sum(b["role"] == "test" for b in bundles)}


def cmd_train_fusion(cfg, args) -> dict:
    v = _run(cfg).train_fusion()
    return {k: v[k]["clinical_score"] for k in v}


def cmd_evaluate(cfg, args) -> dict:
    r = _run(cfg).evaluate()
    return {"fusion_macro_f1": r["fusion_diagnosis"]["macro_f1"], "fusion_plus_auc": r["fusion_plus"]["macro_auc"]}


def cmd_explain(cfg, args) -> dict:
    summary = _run(cfg).explain(args.n_images)
    return {"images": len(summary)}


def cmd_run(cfg, args) -> dict:
    """Every stage after data generation, in order."""
    run = _run(cfg)
    run.make_split()
    run.train_structure()
    run.train_texture()
    run.cache_logits()
    run.train_fusion()
    report = run.evaluate()
    run.explain()
    return {"fusion_macro_f1": report["fusion_diagnosis"]["macro_f1"],
            "fusion_plus_auc": report["fusion_plus"]["macro_auc"]}


COMMANDS = {
    "preprocess": (cmd_preprocess, "clean raw captures to the working resolutions"),
    "vmap": (cmd_vmap, "compute vesselness maps (16-bit PNG)"),
    "synth": (cmd_synth, "generate a synthetic cohort in the manifest layout"),
    "split": (cmd_split, "patient-exclusive test hold-out and folds"),
    "train-structure": (cmd_train_structure, "train the structure stream per fold"),
    "train-texture": (cmd_train_texture, "train the texture stream per fold"),
    "cache-logits": (cmd_cache_logits, "write out-of-fold and test logit bundles"),
    "train-fusion": (cmd_train_fusion, "fit the fusion meta-learner on cached bundles"),
    "evaluate": (cmd_evaluate, "score the held-out test set"),
    "explain": (cmd_explain, "render attention overlays, threat maps and counterfactuals"),
    "run": (cmd_run, "split, train all stages, evaluate and explain"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (dotted path); repeatable")
    common.add_argument("--seed", type=int, help="seed for every sampling step")
    common.add_argument("--run-dir", help="run directory")
    common.add_argument("--data-root", help="cohort root (one folder per patient)")
    common.add_argument("--desk", action="store_true", help="start from the CPU desk-scale preset")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ropscreen", description=__doc__.splitlines()[0],
                                     epilog="Config precedence: defaults < --desk < --config < --set < flags.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_)
        if name in ("preprocess", "vmap"):
            p.add_argument("input", help="image file or directory")
            p.add_argument("--out")
        if name == "preprocess":
            p.add_argument("--target", choices=("structure", "texture", "both"), default="both")
        if name == "synth":
            p.add_argument("--out", help="output directory (default: data root)")
        if name in ("train-structure", "train-texture"):
            p.add_argument("--folds", type=int, nargs="+", help="subset of folds to train")
        if name == "explain":
            p.add_argument("--n-images", type=int)
    return parser


def _fail(code: int, kind: str, command: str | None, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"status": "error", "exit_code": code, "kind": kind, "command": command,
                                 "error": type(exc).__name__, "message": str(exc)}) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, base=desk_preset() if args.desk else None,
                          seed=args.seed, run_dir=args.run_dir, data_root=args.data_root)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "invalid-config", args.command, exc)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, "missing-inputs", args.command, exc)
    from .training import seed_everything
    seed_everything(cfg.seed, cfg.deterministic)
    try:
        result = COMMANDS[args.command][0](cfg, args)
    except (FileNotFoundError, ManifestError) as exc:
        return _fail(EXIT_MISSING, "missing-inputs", args.command, exc)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "invalid-config", args.command, exc)
    except Exception as exc:  # noqa: BLE001 - reported as a structured record
        log.debug("failure", exc_info=True)
        return _fail(EXIT_RUNTIME, "runtime-failure", args.command, exc)
    print(io.dumps({"status": "ok", "command": args.command, **result}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
