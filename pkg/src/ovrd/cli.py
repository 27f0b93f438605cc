"""``ovrd`` command line.

Stages read and write checkpoints in one run directory::

    ovrd gen-synth      --config C --out data/
    ovrd train-tracklet --config C --manifest data/manifest.json --out run/
    ovrd train-prompt   --config C --manifest data/manifest.json --out run/
    ovrd train-v2l      --config C --manifest data/manifest.json --out run/
    ovrd detect         --config C --manifest data/manifest.json --out run/ --mode PredCls
    ovrd evaluate       --config C --manifest data/manifest.json --out run/ --mode PredCls
    ovrd ablate         --config C --manifest data/manifest.json --out run/

``--checkpoint`` names the directory holding upstream checkpoints (defaults to
``--out``). ``OVRD_THREADS`` caps BLAS threads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import config as cfgmod
from .evalkit import MODES, EvalError, evaluate, format_report, run_mode_inputs, write_report
from .pipeline import read_predictions, write_predictions
from .relcls import (ABLATION_MODES, RelClsError, RelationHead, freeze_and_cache_text_embeddings,
                     joint_train_repro_dagger, stage1_train_prompts, stage2_train_v2l)
from .tensorio import RecordError, TensorFormatError, load_dataset, read_checkpoint, write_checkpoint
from .textenc import TextEncoder
from .trackletcls import TrackletClassifier, text_table, train_tracklet_classifier

log = logging.getLogger("ovrd")

TRACKLET_CKPT = "tracklet.ckpt"
PROMPT_CKPT = "prompt.ckpt"
V2L_CKPT = "v2l.ckpt"
_PRODUCER = {TRACKLET_CKPT: "train-tracklet", PROMPT_CKPT: "train-prompt", V2L_CKPT: "train-v2l"}


class StageOrderError(RuntimeError):
    pass


def _need(ckpt_dir: Path, name: str) -> Path:
    path = ckpt_dir / name
    if not path.exists():
        stage = _PRODUCER[name]
        raise StageOrderError(f"missing checkpoint {path} (produced by stage '{stage}'); "
                              f"run `ovrd {stage}` first")
    return path


def _encoder(dataset) -> TextEncoder:
    return TextEncoder.from_meta(dataset.manifest.meta)


def _dirs(args) -> tuple[Path, Path]:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out, Path(args.checkpoint) if args.checkpoint else out


def _load_head(path: Path) -> RelationHead:
    tensors, meta = read_checkpoint(path)
    return RelationHead.from_tensors(tensors, meta)


# -- commands -------------------------------------------------------------------

def cmd_gen_synth(args, conf) -> int:
    from .synth import gen_synth

    manifest = gen_synth(cfgmod.synth_config(conf), args.out)
    print(manifest)
    return 0


def cmd_train_tracklet(args, conf) -> int:
    out, _ = _dirs(args)
    ds = load_dataset(args.manifest)
    enc = _encoder(ds)
    res = train_tracklet_classifier(ds, cfgmod.tracklet_config(conf), enc)
    meta = res.classifier.meta()
    meta.update(enc.meta())
    meta["history"] = res.history
    write_checkpoint(out / TRACKLET_CKPT, res.classifier.tensors(), meta)
    print(out / TRACKLET_CKPT)
    return 0


def train_relation(ds, conf, mode: str, out: Path) -> RelationHead:
    """Both relation stages for one mode; writes prompt and V2L checkpoints."""
    enc = _encoder(ds)
    if mode == "repro_dagger":
        head, _ = joint_train_repro_dagger(ds, cfgmod.relation_config(conf, "prompt", mode), enc)
        write_checkpoint(out / PROMPT_CKPT, head.tensors(), head.meta())
        write_checkpoint(out / V2L_CKPT, head.tensors(), head.meta())
        return head
    head, _ = stage1_train_prompts(ds, cfgmod.relation_config(conf, "prompt", mode), enc)
    freeze_and_cache_text_embeddings(head)
    write_checkpoint(out / PROMPT_CKPT, head.tensors(), head.meta())
    stage2_train_v2l(ds, head, cfgmod.relation_config(conf, "v2l", mode))
    write_checkpoint(out / V2L_CKPT, head.tensors(), head.meta())
    return head


def cmd_train_prompt(args, conf) -> int:
    out, _ = _dirs(args)
    ds = load_dataset(args.manifest)
    rc = cfgmod.relation_config(conf, "prompt")
    enc = _encoder(ds)
    if rc.ablation_mode == "repro_dagger":
        head, _ = joint_train_repro_dagger(ds, rc, enc)
        write_checkpoint(out / V2L_CKPT, head.tensors(), head.meta())
    else:
        head, _ = stage1_train_prompts(ds, rc, enc)
        freeze_and_cache_text_embeddings(head)
    write_checkpoint(out / PROMPT_CKPT, head.tensors(), head.meta())
    print(out / PROMPT_CKPT)
    return 0


def cmd_train_v2l(args, conf) -> int:
    out, ck = _dirs(args)
    head = _load_head(_need(ck, PROMPT_CKPT))
    if head.mode == "repro_dagger":
        raise StageOrderError("the joint variant trains the V2L module in `ovrd train-prompt`")
    ds = load_dataset(args.manifest)
    stage2_train_v2l(ds, head, cfgmod.relation_config(conf, "v2l", head.mode))
    write_checkpoint(out / V2L_CKPT, head.tensors(), head.meta())
    print(out / V2L_CKPT)
    return 0


def detect(ds, conf, ck: Path, mode: str, head=None) -> list:
    if head is None:
        head = _load_head(_need(ck, V2L_CKPT))
    clf = table = None
    if mode != "PredCls":
        tensors, meta = read_checkpoint(_need(ck, TRACKLET_CKPT))
        enc = TextEncoder.from_meta(meta)
        clf = TrackletClassifier.from_tensors(tensors, meta, enc)
        table = text_table(enc, ds.objects.all)
    return run_mode_inputs(mode, ds, (clf, head, table), "test", cfgmod.pipeline_config(conf))


def cmd_detect(args, conf) -> int:
    out, ck = _dirs(args)
    mode = args.mode or conf["eval_mode"]
    _need(ck, V2L_CKPT)
    ds = load_dataset(args.manifest)
    records = detect(ds, conf, ck, mode)
    path = out / f"predictions_{mode}.jsonl"
    write_predictions(path, records)
    print(path)
    return 0


def _report(ds, records, conf, mode, split, out: Path, stem: str) -> dict:
    from .plotting import plot_report

    rep = evaluate(records, ds.ground_truth("test"), ds.objects, ds.predicates,
                   cfgmod.eval_config(conf, mode, split))
    write_report(rep, out, stem)
    plot_report(rep, out / f"{stem}.png")
    return rep


def cmd_evaluate(args, conf) -> int:
    out, _ = _dirs(args)
    mode = args.mode or conf["eval_mode"]
    pred_path = Path(args.predictions) if args.predictions else out / f"predictions_{mode}.jsonl"
    if not pred_path.exists():
        raise StageOrderError(f"missing predictions {pred_path} (produced by stage 'detect'); "
                              f"run `ovrd detect --mode {mode}` first")
    ds = load_dataset(args.manifest)
    rep = _report(ds, read_predictions(pred_path), conf, mode, args.split, out, f"report_{mode}_{args.split}")
    sys.stdout.write(format_report(rep))
    return 0


def cmd_ablate(args, conf) -> int:
    from .plotting import plot_ablation

    out, _ = _dirs(args)
    mode = args.mode or conf["eval_mode"]
    ds = load_dataset(args.manifest)
    reports = {}
    for ab in ABLATION_MODES:
        sub = out / ab
        sub.mkdir(parents=True, exist_ok=True)
        head = train_relation(ds, conf, ab, sub)
        records = detect(ds, conf, Path(args.checkpoint) if args.checkpoint else out, mode, head=head)
        write_predictions(sub / f"predictions_{mode}.jsonl", records)
        reports[ab] = _report(ds, records, conf, mode, args.split, sub, f"report_{mode}_{args.split}")
        sys.stdout.write(f"== {ab}\n" + format_report(reports[ab]))
    (out / "ablation.json").write_text(json.dumps(reports, indent=1, sort_keys=True) + "\n")
    plot_ablation(reports, out / "ablation.png")
    return 0


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train-tracklet": cmd_train_tracklet,
    "train-prompt": cmd_train_prompt,
    "train-v2l": cmd_train_v2l,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ovrd", description="Open-vocabulary video relation detection")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat JSON config file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        if name != "gen-synth":
            sp.add_argument("--manifest", required=True, help="dataset manifest")
            sp.add_argument("--checkpoint", help="directory with upstream checkpoints (default: --out)")
        if name in ("detect", "evaluate", "ablate"):
            sp.add_argument("--mode", choices=MODES)
        if name in ("evaluate", "ablate"):
            sp.add_argument("--split", choices=("novel", "all"), default="novel")
        if name == "evaluate":
            sp.add_argument("--predictions", help="prediction file (default: run directory)")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("OVRD_THREADS")
    try:
        conf = cfgmod.load_config(args.config, {"seed": args.seed})
        if threads:
            with threadpool_limits(limits=int(threads)):
                return COMMANDS[args.command](args, conf)
        return COMMANDS[args.command](args, conf)
    except (StageOrderError, cfgmod.ConfigError, RecordError, TensorFormatError, EvalError,
            RelClsError, ValueError) as exc:
        print(f"ovrd {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
