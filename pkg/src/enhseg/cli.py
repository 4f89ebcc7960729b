"""Command-line entry points: make-splits, annotate, train, eval, report.

Exit codes: 0 success, 2 config error, 3 data error, 4 provider error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataio
from .config import TrainConfig, describe, load_config
from .core import ConfigError, DataError, ProviderError

log = logging.getLogger("enhseg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_PROVIDER = 0, 2, 3, 4


def build_providers(cfg: TrainConfig, desc: dataio.DatasetDescriptor, device: str = "cpu"):
    """``(proposer, feature provider, text embedder)`` for ``providers.kind``."""
    from . import providers as P

    pc = cfg.providers
    if pc.kind == "mock":
        palette = desc.meta.get("palette")
        if palette is None:
            raise ConfigError("mock providers need a dataset with a colour palette (synthetic datasets only)")
        return P.mock_providers(np.asarray(palette), desc.vocabulary.names, dim=pc.mock_dim, seed=pc.mock_seed,
                                patch=pc.mock_patch)
    if pc.kind == "clip-sam":
        if not pc.sam_checkpoint:
            raise ConfigError("providers.sam_checkpoint is required for kind=clip-sam")
        proposer = P.SamProposer(pc.sam_checkpoint, pc.sam_model_type, device=device)
        try:
            from transformers import CLIPModel, CLIPTokenizer
            model = CLIPModel.from_pretrained(pc.clip_model)
            tok = CLIPTokenizer.from_pretrained(pc.clip_model)
        except Exception as e:  # noqa: BLE001
            raise ProviderError(f"failed to load CLIP model {pc.clip_model}: {e}") from e
        feats = P.ClipGemFeatureProvider(model, pc.n_gem_blocks, temperature=pc.gem_temperature)
        return proposer, feats, P.ClipTextEmbedder(model, tok)
    raise ConfigError(f"unknown providers.kind {pc.kind!r} (mock | clip-sam)")


def _descriptor(cfg: TrainConfig) -> dataio.DatasetDescriptor:
    if not cfg.data.root:
        raise ConfigError("data.root is not set")
    return dataio.DatasetDescriptor.load(cfg.data.root)


def _ids_to_annotate(cfg: TrainConfig, desc, all_ids: bool) -> list[str]:
    if all_ids:
        return desc.train_ids()
    split = dataio.load_split(desc, cfg.data.fraction, cfg.data.split_seed)
    if not split.unlabeled_ids and cfg.data.reuse_labeled_when_full:
        return list(split.labeled_ids)
    return list(split.unlabeled_ids)


def run_annotation(cfg: TrainConfig, workers: int = 1, all_ids: bool = False) -> dict:
    from .annotator import annotate_dataset

    desc = _descriptor(cfg)
    ids = _ids_to_annotate(cfg, desc, all_ids)
    proposer, feats, text = build_providers(cfg, desc, cfg.train.device)
    pc = cfg.providers
    checkpoints = {"sam": pc.sam_checkpoint, "clip": pc.clip_model} if pc.kind == "clip-sam" else {}
    return annotate_dataset(ids, lambda i: dataio.load_sample(desc, i, False)[0], proposer, feats, text,
                            desc.vocabulary, cfg.pseudo_dir, pc.template, pc.sim_threshold, workers, checkpoints)


def coverage_summary(manifest: dict) -> dict:
    imgs = manifest["images"].values()
    ok = [r for r in imgs if r["status"] == "ok"]
    cov = np.array([r["coverage"] for r in ok]) if ok else np.zeros(0)
    return {"n_images": len(manifest["images"]), "n_failed": len(manifest["images"]) - len(ok),
            "mean_coverage": float(cov.mean()) if len(cov) else float("nan"),
            "min_coverage": float(cov.min()) if len(cov) else float("nan")}


# -- commands ---------------------------------------------------------------

def cmd_make_splits(args, cfg: TrainConfig) -> int:
    desc = _descriptor(cfg)
    desc.check()
    fractions = [f.strip() for f in args.fractions.split(",")] if args.fractions else [cfg.data.fraction]
    n = len(desc.train_ids())
    print(f"{desc.name}: {n} training ids, seed {cfg.data.split_seed}")
    for f in fractions:
        spec = dataio.load_split(desc, f, cfg.data.split_seed)
        d = dataio.split_dir(desc, f, cfg.data.split_seed)
        print(f"  {f:>6}: {len(spec.labeled_ids):>6} labeled  {len(spec.unlabeled_ids):>6} unlabeled  -> {d}")
    return EXIT_OK


def cmd_annotate(args, cfg: TrainConfig) -> int:
    manifest = run_annotation(cfg, args.workers, args.all)
    s = coverage_summary(manifest)
    print(f"annotated {s['n_images']} images into {cfg.pseudo_dir} ({s['n_failed']} failed)")
    print(f"pixel coverage: mean {100 * s['mean_coverage']:.2f}%  min {100 * s['min_coverage']:.2f}%")
    return EXIT_OK if s["n_failed"] == 0 else EXIT_DATA


def cmd_train(args, cfg: TrainConfig) -> int:
    from .train import run_training

    if args.workers:
        cfg.train.workers = args.workers
    if cfg.train.mode == "semi":
        has_pseudo = (Path(cfg.pseudo_dir) / dataio.MANIFEST_NAME).is_file()
        if args.annotate_first and not (has_pseudo and args.resume):
            cmd_annotate(argparse.Namespace(workers=max(args.workers, 1), all=False), cfg)
        elif not has_pseudo:
            raise DataError(f"no pseudo-labels in {cfg.pseudo_dir}; run `annotate` or pass --annotate-first")
    res = run_training(cfg, resume=args.resume)
    best = res["best_miou"]
    print(f"trained to iteration {cfg.train.max_iters} in {res['seconds']:.1f}s")
    print(f"best val mIoU: {100 * best:.2f}" if best >= 0 else "no validation was run")
    print(f"best checkpoint: {res['best_checkpoint']}")
    print(f"last checkpoint: {res['last_checkpoint']}")
    return EXIT_OK


def cmd_eval(args, cfg: TrainConfig) -> int:
    import torch

    from .eval import evaluate, format_report, write_report
    from .train import _to_tensor_images, load_model

    desc = _descriptor(cfg)
    model, ck = load_model(args.checkpoint, cfg.train.device)
    if list(ck["vocabulary"]["names"]) != list(desc.vocabulary.names):
        raise DataError(f"checkpoint {args.checkpoint} vocabulary {ck['vocabulary']['names']} "
                        f"does not match dataset vocabulary {list(desc.vocabulary.names)}")

    def predict(img):
        with torch.no_grad():
            return model(_to_tensor_images([img]).to(cfg.train.device)).argmax(1)[0].cpu().numpy()

    ids = desc.val_ids()
    samples = ((i, *dataio.load_sample(desc, i, True)) for i in ids)
    res = evaluate(predict, samples, desc.vocabulary, args.dump_dir)
    res["checkpoint"] = str(args.checkpoint)
    print(format_report(res))
    if args.out:
        write_report(args.out, res)
        print(f"report written to {args.out}")
    return EXIT_OK


def cmd_report(args, cfg: TrainConfig) -> int:
    runs = args.runs or [cfg.train.out_dir]
    print(f"{'run':<40} {'iters':>7} {'final loss':>11} {'best mIoU':>10}")
    for r in runs:
        p = Path(r) / "metrics.jsonl"
        if not p.is_file():
            raise DataError(f"no metrics log in {r}")
        recs = [json.loads(ln) for ln in p.read_text().splitlines() if ln.strip()]
        best = None
        for ck in ("last.pt", "best.pt"):
            if (Path(r) / ck).is_file():
                import torch
                best = torch.load(Path(r) / ck, map_location="cpu", weights_only=False)["state"]["best_miou"]
                break
        loss = recs[-1]["loss_total"] if recs else float("nan")
        best_s = f"{100 * best:10.2f}" if best is not None and best >= 0 else f"{'n/a':>10}"
        print(f"{str(r):<40} {len(recs):>7} {loss:>11.4f} {best_s}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    keys = "config keys (section.key = default):\n" + describe()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML config with one mapping per section")
    common.add_argument("overrides", nargs="*", metavar="section.key=value",
                        help="config overrides; these win over the file")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="enhseg", description="Zero-shot pseudo-labels for semi-supervised segmentation.",
                                     epilog=keys, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_, fn):
        p = sub.add_parser(name, parents=[common], help=help_, description=help_, epilog=keys,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(fn=fn)
        return p

    p = add("make-splits", "write labeled/unlabeled id lists and print their sizes", cmd_make_splits)
    p.add_argument("--fractions", help="comma-separated fractions (default: data.fraction), e.g. 1/16,1/8,1/4,1/2")

    p = add("annotate", "generate zero-shot pseudo-labels for the unlabeled split", cmd_annotate)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--all", action="store_true", help="annotate the whole training list")

    p = add("train", "train a segmentation model (semi-supervised or supervised-only)", cmd_train)
    p.add_argument("--workers", type=int, default=0, help="threads for batch preparation")
    p.add_argument("--resume", action="store_true", help="continue from <out_dir>/last.pt")
    p.add_argument("--annotate-first", action="store_true", help="run annotate before training")

    p = add("eval", "evaluate a checkpoint on the validation list", cmd_eval)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dump-dir", help="write predicted masks as palette PNGs here")
    p.add_argument("--out", help="write the report as JSON here")

    p = add("report", "summarise training runs from their metrics logs", cmd_report)
    p.add_argument("--runs", nargs="+", help="run directories (default: train.out_dir)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        return args.fn(args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ProviderError as e:
        print(f"provider error: {e}", file=sys.stderr)
        return EXIT_PROVIDER
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
