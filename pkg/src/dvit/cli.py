"""Command-line entry point for the full pipeline.

Subcommands: split, augment, train, eval, gradcam, kid, judge, report.
Every run writes ``summary.json`` under --out (also on failure).  Exit
codes: 0 success, 1 usage error, 2 runtime failure.

Configuration precedence: built-in defaults, then --config JSON, then
repeated --set key=value overrides (value parsed as JSON when possible).
Secrets (endpoint bearer tokens) come from environment variables only.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from typing import Optional

import numpy as np

from . import data as data_mod
from . import nn
from .data import (AugmentClients, EndpointConfig, HttpEndpoint,
                   NormalizationSpec, augment_dataset, decode_and_normalize,
                   decode_image, merge_and_resplit, read_manifest,
                   resize_bilinear, stratified_split, write_manifest)
from .explain import (MockJudge, aggregate_table, grad_cam, judge_prompt,
                      parse_verdict, read_verdicts, render_overlay, write_verdicts)
from .metrics import kid
from .model import DViT, ModelConfig, load_checkpoint
from .tensor import Tensor, dump_tensors, load_tensors
from .train import RunLog, TrainConfig, TrainError, evaluate, train

__all__ = ["main", "UsageError"]


class UsageError(Exception):
    """Bad flags, bad config keys, malformed argument values."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise UsageError(message)


DEFAULTS: dict[str, dict] = {
    "split": {"ratios": [0.8, 0.1, 0.1]},
    "augment": {"superres": True, "diffusion": True, "diffusion_per_image": 2,
                "edge_low": 100.0, "edge_high": 150.0, "merge_ratios": [0.8, 0.2],
                "caption_url": None, "generation_url": None, "superres_url": None,
                "token_env": "DVIT_API_TOKEN"},
    "train": {"model": "tiny", "input_size": None, "num_classes": None,
              "epochs": 30, "batch_size": 16, "lr": 1e-4, "weight_decay": 0.05,
              "eval_every": 1, "dtype": "f64"},
    "eval": {"batch_size": 16},
    "gradcam": {"layer": "stage4"},
    "kid": {"subsets": 100, "subset_size": None, "degree": 3},
    "judge": {"mock": True, "judge_url": None, "model_name": "model",
              "token_env": "DVIT_API_TOKEN"},
    "report": {},
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def merged_config(command: str, config_path: Optional[str], overrides: list[str]) -> dict:
    cfg = copy.deepcopy(DEFAULTS[command])

    def apply(key: str, value, origin: str):
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise UsageError(f"{origin}: unknown config key {key!r} for "
                                 f"command {command!r}")
            node = node[p]
        if parts[-1] not in node:
            raise UsageError(f"{origin}: unknown config key {key!r} for "
                             f"command {command!r}")
        node[parts[-1]] = value

    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        for key, value in file_cfg.items():
            apply(key, value, config_path)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        apply(key.strip(), _parse_value(raw), "--set")
    return cfg


def build_parser() -> _Parser:
    parser = _Parser(prog="dvit", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="config override (repeatable)")
        p.add_argument("--seed", type=int, default=0)
        return p

    p = add("split", "assign train/valid/test splits to a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ratios", default=None, help="comma-separated, e.g. 0.8,0.1,0.1")

    p = add("augment", "generate superres/diffusion entries and the merged manifest")
    p.add_argument("--manifest", required=True, help="manifest with splits assigned")

    p = add("train", "train a model on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = add("eval", "evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))

    p = add("gradcam", "write a class-activation heatmap and overlay")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--target-class", required=True,
                   help="class id, or class name when --manifest is given")
    p.add_argument("--manifest", default=None)

    p = add("kid", "kernel distance between two feature dumps")
    p.add_argument("--real-features", required=True,
                   help="tensor dump holding a 'features' matrix")
    p.add_argument("--gen-features", required=True)

    p = add("judge", "score heatmaps against ground-truth masks")
    p.add_argument("--heatmaps", required=True, help="directory of <id>.tensors heatmaps")
    p.add_argument("--masks", required=True, help="directory of <id>.tensors masks")
    p.add_argument("--mock", action="store_true",
                   help="force the offline judge even when a URL is configured")

    p = add("report", "aggregate verdict files into a score table")
    p.add_argument("--verdicts", required=True, nargs="+")
    return parser


def _write(path: str, text: str, summary: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    summary["outputs"].append(path)


def _note_output(summary: dict, path: str) -> None:
    summary["outputs"].append(path)


def _ratios_from(args, cfg) -> tuple:
    if args.ratios is not None:
        try:
            parts = tuple(float(r) for r in args.ratios.split(","))
        except ValueError as exc:
            raise UsageError(f"bad --ratios value {args.ratios!r}") from exc
        return parts
    return tuple(cfg["ratios"])


def _cmd_split(args, cfg, summary):
    entries = read_manifest(args.manifest)
    out_manifest = os.path.join(args.out, "split.tsv")
    result = stratified_split(entries, _ratios_from(args, cfg), seed=args.seed)
    write_manifest(out_manifest, result)
    _note_output(summary, out_manifest)
    summary["counts"] = {s: sum(e.split == s for e in result)
                         for s in ("train", "valid", "test")}


def _client_for(url: Optional[str], token_env: str, mock_factory):
    if url:
        return HttpEndpoint(EndpointConfig(url=url, token_env=token_env))
    return mock_factory()


def _cmd_augment(args, cfg, summary):
    entries = read_manifest(args.manifest)
    clients = AugmentClients(
        caption=_client_for(cfg["caption_url"], cfg["token_env"], data_mod.MockCaptionClient),
        generation=_client_for(cfg["generation_url"], cfg["token_env"], data_mod.MockGenerationClient),
        superres=_client_for(cfg["superres_url"], cfg["token_env"], data_mod.MockSuperresClient),
    )
    gen_dir = os.path.join(args.out, "generated")
    generated, quarantined = augment_dataset(
        entries, gen_dir, clients, superres=cfg["superres"], diffusion=cfg["diffusion"],
        diffusion_per_image=cfg["diffusion_per_image"],
        edge_low=cfg["edge_low"], edge_high=cfg["edge_high"])
    gen_manifest = os.path.join(args.out, "generated.tsv")
    write_manifest(gen_manifest, generated)
    _note_output(summary, gen_manifest)
    merged = merge_and_resplit(entries, generated, tuple(cfg["merge_ratios"]), seed=args.seed)
    merged_manifest = os.path.join(args.out, "merged.tsv")
    write_manifest(merged_manifest, merged)
    _note_output(summary, merged_manifest)
    quar_manifest = os.path.join(args.out, "quarantined.tsv")
    write_manifest(quar_manifest, quarantined)
    _note_output(summary, quar_manifest)
    summary["generated"] = len(generated)
    summary["quarantined"] = len(quarantined)


def _model_config_from(cfg: dict, entries) -> ModelConfig:
    classes = sorted({e.label for e in entries})
    num_classes = cfg["num_classes"] or len(classes)
    variant = cfg["model"]
    if variant == "tiny":
        size = cfg["input_size"] or 64
        return ModelConfig.tiny(num_classes=num_classes, input_size=size)
    if variant == "full":
        size = cfg["input_size"] or 512
        return ModelConfig(num_classes=num_classes, input_size=size)
    raise UsageError(f"unknown model variant {variant!r} (expected tiny or full)")


def _cmd_train(args, cfg, summary):
    entries = read_manifest(args.manifest)
    dtype = {"f64": np.float64, "f32": np.float32}.get(cfg["dtype"])
    if dtype is None:
        raise UsageError(f"unknown dtype {cfg['dtype']!r} (expected f64 or f32)")
    tc = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                     weight_decay=cfg["weight_decay"], seed=args.seed,
                     checkpoint_dir=os.path.join(args.out, "checkpoints"),
                     eval_every=cfg["eval_every"])
    if args.resume:
        ck = load_checkpoint(args.resume)
        model = ck.model
        optimizer = nn.AdamW(dict(model.named_parameters()), lr=tc.lr, betas=tc.betas,
                             eps=tc.eps, weight_decay=tc.weight_decay)
        if ck.opt_state:
            optimizer.load_state_tensors(ck.opt_state, ck.opt_step)
        start_epoch = ck.epoch
        # The run log lives beside the checkpoint dir; carry it forward so
        # epochs stay contiguous from 1, dropping records past the resume point.
        prior = os.path.join(os.path.dirname(os.path.abspath(args.resume)),
                             os.pardir, "runlog.jsonl")
        prior = os.path.normpath(prior)
        if not os.path.exists(prior):
            raise TrainError(f"cannot resume: run log not found at {prior}")
        log = RunLog.load_jsonl(prior)
        del log.records[start_epoch:]
    else:
        model = DViT(_model_config_from(cfg, entries),
                     rng=np.random.default_rng(args.seed), dtype=dtype)
        optimizer = None
        start_epoch = 0
        log = None
    model, log = train(model, entries, tc, optimizer=optimizer,
                       start_epoch=start_epoch, log=log)
    log_path = os.path.join(args.out, "runlog.jsonl")
    log.dump_jsonl(log_path)
    _note_output(summary, log_path)
    _note_output(summary, os.path.join(tc.checkpoint_dir, "last.ckpt"))
    summary["final_train_loss"] = log.losses()[-1] if log.records else None
    summary["epochs_run"] = len(log.records)


def _cmd_eval(args, cfg, summary):
    entries = read_manifest(args.manifest)
    model = load_checkpoint(args.checkpoint).model
    report, cm = evaluate(model, entries, args.split, batch_size=cfg["batch_size"])
    _write(os.path.join(args.out, "metrics.json"), report.to_json(), summary)
    _write(os.path.join(args.out, "metrics.txt"), report.to_text(), summary)
    _write(os.path.join(args.out, "confusion.json"),
           json.dumps({"class_names": cm.class_names, "counts": cm.counts.tolist()},
                      indent=2), summary)
    summary["overall_accuracy"] = report.overall_accuracy
    summary["mean_accuracy"] = report.mean_accuracy
    summary["kappa"] = report.kappa


def _cmd_gradcam(args, cfg, summary):
    model = load_checkpoint(args.checkpoint).model
    try:
        target = int(args.target_class)
    except ValueError:
        if not args.manifest:
            raise UsageError("a class name needs --manifest to resolve its id")
        classes = sorted({e.label for e in read_manifest(args.manifest)})
        if args.target_class not in classes:
            raise UsageError(f"class {args.target_class!r} not in manifest classes "
                             f"{classes}")
        target = classes.index(args.target_class)
    size = model.cfg.input_size
    x = decode_and_normalize(args.image, NormalizationSpec(size=size))
    heatmap = grad_cam(model, Tensor(x.data[None].astype(model.dtype)), target,
                       layer=cfg["layer"])
    hm_path = os.path.join(args.out, "heatmap.tensors")
    dump_tensors(hm_path, {"heatmap": heatmap.values},
                 meta={"layer": heatmap.layer, "target_class": heatmap.target_class})
    _note_output(summary, hm_path)
    base = resize_bilinear(decode_image(args.image), size)
    overlay_path = os.path.join(args.out, "overlay.png")
    render_overlay(base, heatmap, path=overlay_path)
    _note_output(summary, overlay_path)
    summary["target_class"] = target
    summary["layer"] = heatmap.layer


def _features_from(path: str) -> np.ndarray:
    tensors, _ = load_tensors(path)
    if "features" not in tensors:
        raise UsageError(f"{path}: tensor dump lacks a 'features' entry")
    return tensors["features"]


def _cmd_kid(args, cfg, summary):
    est = kid(_features_from(args.real_features), _features_from(args.gen_features),
              subsets=cfg["subsets"], subset_size=cfg["subset_size"],
              degree=cfg["degree"], seed=args.seed)
    _write(os.path.join(args.out, "kid.json"),
           json.dumps(est.__dict__, indent=2, sort_keys=True), summary)
    summary["kid"] = est.value


def _load_single(path: str, key: str) -> np.ndarray:
    tensors, _ = load_tensors(path)
    if key not in tensors:
        raise UsageError(f"{path}: tensor dump lacks a {key!r} entry")
    return tensors[key]


def _cmd_judge(args, cfg, summary):
    names = sorted(f[:-len(".tensors")] for f in os.listdir(args.heatmaps)
                   if f.endswith(".tensors"))
    if not names:
        raise UsageError(f"{args.heatmaps}: no .tensors heatmaps found")
    use_mock = args.mock or cfg["mock"] or not cfg["judge_url"]
    judge = MockJudge()
    endpoint = None
    if not use_mock:
        endpoint = HttpEndpoint(EndpointConfig(url=cfg["judge_url"],
                                               token_env=cfg["token_env"]))
    verdicts = []
    for name in names:
        hm = _load_single(os.path.join(args.heatmaps, f"{name}.tensors"), "heatmap")
        mask_path = os.path.join(args.masks, f"{name}.tensors")
        if not os.path.exists(mask_path):
            raise UsageError(f"no mask for heatmap {name!r} under {args.masks}")
        mask = _load_single(mask_path, "mask")
        if endpoint is None:
            verdicts.append(judge.judge(hm, mask, model_name=cfg["model_name"],
                                        class_name=name, image_id=name))
        else:
            prompt = judge_prompt(name, f"image:{name}", f"heatmap:{name}")
            response = endpoint.post_json({"image": "", "prompt": prompt, "edges": ""})
            if "verdict" not in response or not isinstance(response["verdict"], str):
                raise data_mod.EndpointParseError(
                    "judge endpoint: response lacks string field 'verdict'")
            verdicts.append(parse_verdict(response["verdict"],
                                          model_name=cfg["model_name"],
                                          class_name=name, image_id=name))
    verdicts_path = os.path.join(args.out, "verdicts.jsonl")
    write_verdicts(verdicts_path, verdicts)
    _note_output(summary, verdicts_path)
    text, as_json = aggregate_table(verdicts)
    _write(os.path.join(args.out, "aggregate.txt"), text, summary)
    _write(os.path.join(args.out, "aggregate.json"), as_json, summary)
    summary["judged"] = len(verdicts)


def _cmd_report(args, cfg, summary):
    verdicts = []
    for path in args.verdicts:
        verdicts.extend(read_verdicts(path))
    text, as_json = aggregate_table(verdicts)
    _write(os.path.join(args.out, "aggregate.txt"), text, summary)
    _write(os.path.join(args.out, "aggregate.json"), as_json, summary)
    summary["verdicts"] = len(verdicts)


_HANDLERS = {
    "split": _cmd_split,
    "augment": _cmd_augment,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcam": _cmd_gradcam,
    "kid": _cmd_kid,
    "judge": _cmd_judge,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = merged_config(args.command, args.config, args.overrides)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return 1
    os.makedirs(args.out, exist_ok=True)
    summary = {"command": args.command, "seed": args.seed, "config": cfg,
               "status": "ok", "outputs": []}
    code = 0
    try:
        _HANDLERS[args.command](args, cfg, summary)
    except UsageError as exc:
        summary["status"] = "usage-error"
        summary["error"] = str(exc)
        sys.stderr.write(f"usage error: {exc}\n")
        code = 1
    except Exception as exc:
        summary["status"] = "error"
        summary["error"] = f"{type(exc).__name__}: {exc}"
        sys.stderr.write(f"error: {summary['error']}\n")
        code = 2
    with open(os.path.join(args.out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
