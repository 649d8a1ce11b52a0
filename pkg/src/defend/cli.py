"""Command-line entry point: generate-data, train, eval, attn-map, validate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy.stats import binomtest

from . import checkpoint as ckpt
from .config import ConfigError, RunConfig, parse_set, resolve, write_resolved
from .data import (
    DataConfigError, RecordError, Vocab, build_vocab, generate_synthetic_dataset, load_dataset,
    pixel_centroid_baseline, read_records, save_dataset, tokenize, training_corpus, validate_record,
    vqa_pairs,
)
from .evaluation import (
    ProbeConfig, answer_vocabulary, balanced_accuracy, export_attention_map, finetune_vqa,
    global_features, infer_features, linear_probe, toy_vqa, vqa_scores, zero_shot_prompts,
    zero_shot_scores,
)
from .model import DefendModel
from .nn import NumericError
from .objectives import NonFiniteLossError
from .trainer import evaluate_loss, new_state, plain_batch, run_training

log = logging.getLogger("defend")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class DataError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# helpers

def _config(args) -> RunConfig:
    overrides = parse_set(args.set)
    for flag, key in (("classes", "data.classes"), ("per_class", "data.per_class"),
                      ("image_size", "data.image_size")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return resolve(args.preset, args.config, overrides, args.seed)


def _load_data(path):
    try:
        return load_dataset(path)
    except (FileNotFoundError, RecordError, json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"cannot load dataset from {path}: {exc}") from exc


def _build_model(cfg: RunConfig) -> DefendModel:
    torch.manual_seed(cfg.seed)
    return DefendModel(cfg.encoder, cfg.fem, cfg.decoder)


def load_model(path, expected: dict | None = None):
    """(model, vocab, RunConfig, header) from a checkpoint file."""
    header, arrays = ckpt.read_checkpoint(path)
    if expected:
        ckpt.check_header(header, expected)
    cfg = RunConfig.from_flat(header["config"])
    vocab = Vocab(header["vocab"])
    model = _build_model(cfg)
    ckpt.load_into(model, arrays)
    model.eval()
    return model, vocab, cfg, header


def _save(path, state, vocab, cfg: RunConfig, phase: str, next_phase: int):
    return ckpt.save_checkpoint(path, state.model, vocab, cfg.to_flat(), state.step, phase, next_phase,
                                cfg.sampler.lambda_threshold, state.optimizer)


# ---------------------------------------------------------------------------
# commands

def cmd_generate_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    write_resolved(cfg, out, {"command": "generate-data"})
    samples, manifest = generate_synthetic_dataset(
        cfg.data.per_class, cfg.data.classes, cfg.data.image_size, cfg.seed, cfg.encoder.patch_size)
    save_dataset(samples, manifest, out)
    print(f"wrote {len(samples)} samples ({len(manifest.classes)} classes, "
          f"zero-shot: {', '.join(manifest.zeroshot_classes)}) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    write_resolved(cfg, out, {"command": "train", "data_dir": str(args.data)})
    data = _load_data(args.data)
    train = data.split("train")
    if not train:
        raise DataError("training split is empty")
    zs = set(data.manifest.zeroshot)
    if any(s.record.image_id in zs for s in train):
        raise DataError("zero-shot images found in the training split")

    start_phase, resume = 0, None
    if args.resume:
        header, arrays = ckpt.read_checkpoint(args.resume)
        cfg = RunConfig.from_flat(header["config"])
        vocab = Vocab(header["vocab"])
        resume = (header, arrays)
    else:
        vocab = build_vocab(training_corpus(train))
        size = train[0].image.shape[0]
        try:
            cfg = replace(cfg, encoder=replace(cfg.encoder, vocab_size=len(vocab), image_size=size))
        except ValueError as exc:
            raise ConfigError(f"dataset images ({size}px) do not fit the encoder: {exc}") from exc
    write_resolved(cfg, out, {"command": "train", "data_dir": str(args.data)})

    model = _build_model(cfg)
    state = new_state(model, cfg.train)
    ck_dir = out / "checkpoints"
    if resume is not None:
        header, arrays = resume
        ckpt.load_into(model, arrays, state.optimizer, header)
        state.step = int(header["step"])
        start_phase = int(header["next_phase"])
        log.info("resuming at step %d, phase %d", state.step, start_phase)
    else:
        _save(ck_dir / "ckpt_0.npz", state, vocab, cfg, "init", 0)

    fixed = plain_batch(train[:64], vocab, cfg.encoder, cfg.sampler)
    initial = evaluate_loss(model, fixed, cfg.train)
    phase_names = [p.name for p in cfg.train.phases]

    def on_phase_end(name, st):
        _save(ck_dir / f"ckpt_{name}.npz", st, vocab, cfg, name, phase_names.index(name) + 1)

    t0 = time.time()
    progress = run_training(state, train, vocab, cfg.sampler, cfg.train, out / "loss_log.csv",
                            start_phase=start_phase, max_steps=args.max_steps, on_phase_end=on_phase_end)
    elapsed = time.time() - t0
    _save(ck_dir / "final.npz", state, vocab, cfg, "final", progress.phase_index)
    final = evaluate_loss(model, fixed, cfg.train)
    summary = {
        "steps": state.step,
        "seconds": round(elapsed, 2),
        "initial_loss": initial.__dict__ | {"active": list(initial.active)},
        "final_loss": final.__dict__ | {"active": list(final.active)},
        "vocab_size": len(vocab),
    }
    (out / "train_summary.json").write_text(json.dumps(summary, indent=1), encoding="utf-8")
    print(f"trained {state.step} steps in {elapsed:.1f}s; fixed-batch loss "
          f"{initial.total:.4f} -> {final.total:.4f}")
    return EXIT_OK


def _expected_dims(args) -> dict:
    if not (args.preset or args.config or args.set):
        return {}
    cfg = _config(args)
    flat = cfg.to_flat()
    return {k: flat[f"encoder.{k}"] for k in ("model_dim", "num_layers", "num_heads", "patch_size")}


def eval_probe(model, data, cfg: RunConfig) -> dict:
    train, test = data.split("train"), data.split("test")
    ftr = global_features(model, [s.image for s in train])
    fte = global_features(model, [s.image for s in test])
    _, report = linear_probe(ftr, [s.class_id for s in train], fte, [s.class_id for s in test],
                             ProbeConfig(epochs=cfg.eval.probe_epochs, seed=cfg.seed), data.classes)
    n_seen = len(data.manifest.seen_classes)
    return report.to_json() | {
        "n_train": len(train), "n_test": len(test), "chance": 1.0 / n_seen,
        "pixel_centroid_baseline": pixel_centroid_baseline(train, test),
    }


def eval_zeroshot(model, vocab, data, cfg: RunConfig) -> dict:
    classes = data.classes
    prompts = zero_shot_prompts(classes)
    held = data.split("zeroshot")
    if cfg.eval.zeroshot_images:
        held = held[: cfg.eval.zeroshot_images]
    if not held:
        raise DataError("no zero-shot images in the dataset")
    scores = zero_shot_scores(model, vocab, [s.image for s in held], prompts)
    pred = np.argsort(-scores, axis=1, kind="stable")[:, 0]
    labels = np.array([s.class_id for s in held])
    k = int((pred == labels).sum())
    n = len(held)
    chance = 1.0 / len(classes)
    test = data.split("test")
    all_scores = np.concatenate([zero_shot_scores(model, vocab, [s.image for s in test], prompts), scores])
    all_labels = np.concatenate([[s.class_id for s in test], labels])
    all_pred = np.argsort(-all_scores, axis=1, kind="stable")[:, 0]
    return {
        "accuracy": k / n, "correct": k, "n": n, "chance": chance,
        "p_value": float(binomtest(k, n, chance, alternative="greater").pvalue),
        "held_out_classes": data.manifest.zeroshot_classes,
        "prompts": prompts,
        "prediction_counts": np.bincount(pred, minlength=len(classes)).tolist(),
        "all_classes_accuracy": float((all_pred == all_labels).mean()),
        "all_classes_balanced_accuracy": balanced_accuracy(all_pred, all_labels),
        "n_all": int(len(all_labels)),
    }


def eval_vqa(model, vocab, data, cfg: RunConfig, out: Path) -> dict:
    train, test = data.split("train"), data.split("test")
    answers = answer_vocabulary(train)
    tuned = finetune_vqa(model, vocab, train, steps=cfg.eval.vqa_steps, seed=cfg.seed)
    pred, gold = [], []
    with open(out / "vqa_results.jsonl", "w", encoding="utf-8") as fh:
        for s in test:
            for q, a in vqa_pairs(s.record):
                got, lp = toy_vqa(tuned, vocab, s.image, q, answers)
                pred.append(got)
                gold.append(a)
                fh.write(json.dumps({"image_id": s.record.image_id, "question": q, "generated": got,
                                     "reference": a, "log_prob": lp}) + "\n")
    return vqa_scores(pred, gold) | {"answers": answers}


def eval_describe(model, vocab, data, out: Path, limit: int = 20) -> dict:
    test = data.split("test")[:limit]
    exact = 0
    with open(out / "descriptions.jsonl", "w", encoding="utf-8") as fh:
        for s in test:
            f_G_star, f_T_star = infer_features(model, s.image, tokenize(s.prompt_text, vocab, model.enc_cfg.max_tokens))
            res = model.decoder.generate(f_T_star, f_G_star, mode="beam")
            text = vocab.decode(res.tokens)
            exact += text == s.description_text
            fh.write(json.dumps({"image_id": s.record.image_id, "generated": text,
                                 "reference": s.description_text, "log_prob": res.log_prob}) + "\n")
    return {"exact_match": exact / max(1, len(test)), "n": len(test)}


def cmd_eval(args) -> int:
    model, vocab, cfg, header = load_model(args.checkpoint, _expected_dims(args))
    out = Path(args.out)
    write_resolved(cfg, out, {"command": "eval", "checkpoint": str(args.checkpoint), "task": args.task})
    data = _load_data(args.data)
    tasks = ["probe", "zeroshot", "vqa", "describe"] if args.task == "all" else [args.task]
    model.student = None    # inference uses the teacher only
    metrics = {"checkpoint": str(args.checkpoint), "step": header["step"], "phase": header["phase"]}
    for task in tasks:
        t0 = time.time()
        if task == "probe":
            metrics["probe"] = eval_probe(model, data, cfg)
        elif task == "zeroshot":
            metrics["zeroshot"] = eval_zeroshot(model, vocab, data, cfg)
        elif task == "vqa":
            metrics["vqa"] = eval_vqa(model, vocab, data, cfg, out)
        elif task == "describe":
            metrics["describe"] = eval_describe(model, vocab, data, out)
        log.info("%s evaluated in %.1fs", task, time.time() - t0)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1), encoding="utf-8")
    print(json.dumps({k: v for k, v in metrics.items() if k not in ("checkpoint",)}, indent=1)[:2000])
    return EXIT_OK


def cmd_attn_map(args) -> int:
    model, _, cfg, _ = load_model(args.checkpoint, _expected_dims(args))
    out = Path(args.out)
    write_resolved(cfg, out, {"command": "attn-map", "checkpoint": str(args.checkpoint)})
    data = _load_data(args.data)
    unknown = [i for i in args.ids if i not in data.samples]
    if unknown:
        ids = sorted(data.samples)
        raise DataError(f"unknown image id(s) {unknown}; valid ids run {ids[0]} .. {ids[-1]}")
    (out / "attn").mkdir(parents=True, exist_ok=True)
    model.student = None
    for image_id in args.ids:
        amap = export_attention_map(model, data.samples[image_id].image, image_id)
        Image.fromarray(amap.overlay, mode="RGB").save(out / "attn" / f"{image_id}.png")
        np.save(out / "attn" / f"{image_id}.npy", amap.scores)
    print(f"wrote {len(args.ids)} attention overlays to {out / 'attn'}")
    return EXIT_OK


def cmd_validate(args) -> int:
    path = Path(args.file)
    if not path.exists():
        raise DataError(f"{path} not found")
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix == ".jsonl":
            records = read_records(path)
        else:
            obj = json.loads(text)
            records = obj if isinstance(obj, list) else [obj]
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from exc
    n_bad = 0
    for i, rec in enumerate(records):
        errors = validate_record(rec)
        if errors:
            n_bad += 1
            rid = rec.get("image_id", f"#{i}") if isinstance(rec, dict) else f"#{i}"
            for e in errors:
                print(f"{rid}: {e}")
    print(f"{len(records) - n_bad}/{len(records)} records valid")
    return EXIT_OK if n_bad == 0 else EXIT_DATA


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="defend", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--preset", choices=["desk-smoke", "desk-full"])
        p.add_argument("--config", help="JSON file of flat dotted keys")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, help=f"random seed (falls back to ${'DEFEND_SEED'})")

    p = sub.add_parser("generate-data", help="write a synthetic dataset")
    common(p)
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", dest="per_class", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="run the three-phase schedule")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--resume", help="checkpoint to continue from (its next phase)")
    p.add_argument("--max-steps", dest="max_steps", type=int, help="stop after this many optimizer steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="probe / zero-shot / VQA metrics")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=["probe", "zeroshot", "vqa", "describe", "all"], default="all")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attn-map", help="export class-token attention overlays")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ids", nargs="+", required=True)
    p.set_defaults(func=cmd_attn_map)

    p = sub.add_parser("validate", help="check records against the annotation schema")
    p.add_argument("file")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataConfigError, ckpt.CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, RecordError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLossError, NumericError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
