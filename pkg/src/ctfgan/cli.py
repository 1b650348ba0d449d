"""Command-line entry point: ``ctfgan <command> ...``.

Exit codes: 0 success, 1 validation or usage error, 2 training aborted on a
non-finite loss, 3 I/O or checkpoint integrity error.
"""

import argparse
import json
import logging
import os
from pathlib import Path
import shutil
import sys
import tempfile

import torch

from .checkpoint import load_bundle
from .config import ConfigError, RunConfig, load_config
from .data import LabelSpaces, _read_image, load_corpus, normalize
from .errors import (
    CheckpointIntegrityError,
    ContractError,
    DataError,
    LabelDomainError,
    TrainingAborted,
)
from .evaluation import emit_sample_grid
from .synthesis import sample
from .training import CTFGAN, Trainer, build_datasets, train

logger = logging.getLogger("ctfgan")

EXIT_OK, EXIT_VALIDATION, EXIT_ABORT, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _grid(text):
    try:
        rows, cols = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 4x4, got {text!r}") from None
    return rows, cols


def build_parser():
    parser = _Parser(prog="ctfgan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="run both training phases")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint directory to continue from")

    p = sub.add_parser("sample", help="write a grid of generated images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--grid", type=_grid, default=None)
    p.add_argument("--class", dest="class_id", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")

    p = sub.add_parser("extract-ctf", help="dump the CTFs G_LH produces for one LQ image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--class", dest="class_id", type=int, required=True)
    p.add_argument("--lq-label", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="compute the IS/FID surrogate report of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--num-samples", type=int)
    p.add_argument("--out", help="also write the report here")

    p = sub.add_parser("validate-data", help="check datasets without training")
    p.add_argument("--config")
    p.add_argument("--root")
    p.add_argument("--manifest")
    p.add_argument("--hq-classes")
    p.add_argument("--lq-classes")
    return parser


def _config_for(args, stored=None):
    if getattr(args, "config", None):
        return load_config(args.config)
    if stored is not None:
        return stored
    raise UsageError("--config is required")


def _require_checkpoint(path):
    if not Path(path).exists():
        raise UsageError(f"checkpoint {path} does not exist")


def _load_models(checkpoint):
    _require_checkpoint(checkpoint)
    manifest, state = load_bundle(checkpoint)
    cfg = RunConfig.model_validate(json.loads(state["config"]))
    c_h, c_l = state["num_classes"]
    model = CTFGAN(cfg.model, c_h, c_l)
    model.load_state_dict(state["model"])
    model.eval()
    return cfg, model, manifest


def cmd_train(args):
    cfg = load_config(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    if args.seed is not None:
        cfg.train.seed = args.seed
    datasets = build_datasets(cfg)
    artifacts = train(cfg, datasets, cfg.output_dir, resume_from=args.resume)
    print(json.dumps({
        "run_dir": str(artifacts.run_dir),
        "checkpoints": [str(p) for p in artifacts.checkpoints],
        "report": artifacts.report.to_record(),
    }, indent=2))
    return EXIT_OK


def cmd_sample(args):
    stored, model, _ = _load_models(args.checkpoint)
    cfg = _config_for(args, stored)
    grid = args.grid or (1, args.n)
    if grid[0] * grid[1] != args.n:
        raise ContractError(f"grid {grid[0]}x{grid[1]} does not fit {args.n} images")
    lq = build_datasets(cfg).lq
    images = sample(model.ga, model.glh, model.extractor, lq.images, lq.labels, args.n,
                    args.class_id, args.seed, zero_ctfs=cfg.train.ctf_ablation)
    path = emit_sample_grid(images, args.out, grid)
    print(str(path))
    return EXIT_OK


def cmd_extract_ctf(args):
    cfg, model, _ = _load_models(args.checkpoint)
    try:
        pixels = _read_image(args.image)
    except OSError as exc:
        raise OSError(f"cannot read {args.image}: {exc}") from None
    side = cfg.model.lq_resolution
    if tuple(pixels.shape[-2:]) != (side, side):
        raise ContractError(f"LQ image must be {side}x{side}, got {pixels.shape[-2]}x{pixels.shape[-1]}")
    lq = normalize(pixels).unsqueeze(0)
    g = torch.Generator().manual_seed(args.seed)
    with torch.no_grad():
        _, trace = model.glh(lq, torch.tensor([args.lq_label]), torch.tensor([args.class_id]), generator=g)
        ctfs = model.extractor(trace, lq)
    tensors = {f"ctf_{c.block_index}": c.values[0].contiguous() for c in ctfs}
    manifest = {
        "class_id": args.class_id,
        "lq_label": args.lq_label,
        "seed": args.seed,
        "tensors": [
            {"name": f"ctf_{c.block_index}", "block_index": c.block_index,
             "shape": list(c.values.shape[1:]), "difference_channels": c.num_difference_channels,
             "embed_channels": c.num_embed_channels}
            for c in ctfs
        ],
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}."))
    try:
        torch.save(tensors, tmp / "ctfs.pt")
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        if out.exists():
            shutil.rmtree(out)
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(json.dumps(manifest["tensors"]))
    return EXIT_OK


def cmd_eval(args):
    _require_checkpoint(args.checkpoint)
    _, state = load_bundle(args.checkpoint)
    stored = RunConfig.model_validate(json.loads(state["config"]))
    cfg = _config_for(args, stored)
    trainer = Trainer.from_checkpoint(args.checkpoint, cfg=cfg)
    report = trainer.evaluate(args.num_samples)
    text = json.dumps(report.to_record(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def cmd_validate_data(args):
    if args.config:
        cfg = load_config(args.config)
        ds = build_datasets(cfg)
        summary = {"hq": len(ds.hq), "lq": len(ds.lq), "hq_eval": len(ds.hq_eval),
                   "c_h": ds.label_spaces.c_h, "c_l": ds.label_spaces.c_l}
    else:
        if not (args.root and args.manifest and args.hq_classes and args.lq_classes):
            raise UsageError("give --config, or --root, --manifest, --hq-classes and --lq-classes")
        spaces = LabelSpaces(args.hq_classes.split(","), args.lq_classes.split(","))
        ds = load_corpus(args.root, args.manifest, spaces)
        summary = {"records": len(ds), "hq": ds.tiers.count("hq"), "lq": ds.tiers.count("lq")}
    print(json.dumps({"valid": True, **summary}))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "extract-ctf": cmd_extract_ctf,
    "eval": cmd_eval,
    "validate-data": cmd_validate_data,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print("config error:", file=sys.stderr)
        for v in exc.violations:
            print(f"  {v}", file=sys.stderr)
        return EXIT_VALIDATION
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (UsageError, ContractError, LabelDomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (CheckpointIntegrityError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
