"""Command-line pipeline: phantom -> preprocess -> curate -> pretrain -> zeroshot -> probe -> report.

Every subcommand writes under ``<out-dir>/<subcommand>/`` and finishes with an
``artifacts.json`` listing each produced file and its sha256.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ConfigError

SUBCOMMANDS = ("phantom", "preprocess", "curate", "pretrain", "zeroshot", "probe", "report", "interpret")


class PipelineError(RuntimeError):
    """A required upstream artifact is missing or inconsistent."""


# --------------------------------------------------------------------------- plumbing

def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_artifact_manifest(stage_dir: Path, subcommand: str, cfg: dict) -> Path:
    """Hash every file under ``stage_dir``; no timestamps, so reruns compare byte-for-byte."""
    files = sorted(p for p in stage_dir.rglob("*") if p.is_file() and p.name != "artifacts.json")
    entries = [{"path": p.relative_to(stage_dir).as_posix(), "sha256": sha256(p), "bytes": p.stat().st_size}
               for p in files]
    body = {
        "subcommand": subcommand,
        "config_sha256": hashlib.sha256(cfgmod.dump_config(cfg).encode()).hexdigest(),
        "artifacts": entries,
    }
    out = stage_dir / "artifacts.json"
    out.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return out


def _json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise PipelineError(f"missing {path}; run `{hint}` first")
    return path


def _stage(root: Path, name: str) -> Path:
    d = root / name
    d.mkdir(parents=True, exist_ok=True)
    return d


# --------------------------------------------------------------------------- shared loaders

def _load_curated(root: Path):
    from .curation import read_manifest

    cur = root / "curate"
    records = read_manifest(_require(cur / "manifest.jsonl", "curate"))
    pools = {}
    with open(_require(cur / "captions.jsonl", "curate")) as fh:
        for line in fh:
            d = json.loads(line)
            pools[d["image_id"]] = d["pool"]
    return records, pools


def _load_images(root: Path, records) -> np.ndarray:
    from .preprocess import read_image

    base = _require(root / "preprocess", "preprocess")
    return np.stack([read_image(base / r.path)[..., 0] for r in records]).astype(np.float32)


def _load_model(root: Path):
    from .model import load_checkpoint
    from .tokenizer import Vocab

    model, meta = load_checkpoint(_require(root / "pretrain" / "best.pt", "pretrain"))
    vocab = Vocab.load(_require(root / "curate" / "vocab.txt", "curate"))
    return model, vocab, meta


def _prompt_bank(cfg: dict):
    from .zeroshot import PromptBank

    z = cfg["zeroshot"]
    return PromptBank.load(z["prompts_file"], style=z["prompt_style"])


def _crop_like_preprocess(rgb: np.ndarray, masks: list[np.ndarray], size: int):
    """Apply the image pipeline's fan crop and resize to structure masks."""
    from .preprocess import extract_fan, fan_bbox, remove_annotations, standardize

    gray = remove_annotations(rgb)
    cropped, fan = extract_fan(gray)
    y0, y1, x0, x1 = fan_bbox(fan)
    img = standardize(cropped, size)
    out = [standardize((m & fan)[y0:y1, x0:x1].astype(np.float32), size) > 0.5 for m in masks]
    return img, out


# --------------------------------------------------------------------------- subcommands

def cmd_phantom(cfg: dict, root: Path, args) -> Path:
    from .phantom import gen_dataset, write_dataset

    p = cfg["phantom"]
    out = _stage(root, "phantom")
    records = gen_dataset(
        p["n_patients"], p["images_per_patient"], class_mix=p["class_mix"], seed=cfg["seed"], size=p["size"],
        annotate_fraction=p["annotate_fraction"], ga_mean=p["ga_mean"], ga_std=p["ga_std"],
        test_fraction=p["test_fraction"], ga_distribution=p["ga_distribution"],
    )
    write_dataset(records, out)
    return out


def cmd_preprocess(cfg: dict, root: Path, args) -> Path:
    from .preprocess import preprocess_directory

    src = _require(root / "phantom" / "images", "phantom")
    out = _stage(root, "preprocess")
    report = preprocess_directory(src, out / "images", cfg["preprocess"]["size"])
    (out / "images" / "preprocess_report.json").replace(out / "preprocess_report.json")
    _json(out / "summary.json", {"n_images": len(report["images"]),
                                 "inpainted_images": sum(v["inpainted_pixels"] > 0 for v in report["images"].values())})
    return out


def cmd_curate(cfg: dict, root: Path, args) -> Path:
    from dataclasses import replace

    from .curation import (TemplateBank, build_shards, caption_pool, confident_flags, oof_probabilities,
                           pseudo_label, read_manifest, route_subgroup, write_manifest, write_shards)
    from .tokenizer import train_bpe

    c = cfg["curate"]
    records = read_manifest(_require(root / "phantom" / "manifest.jsonl", "phantom"))
    report = json.loads(_require(root / "preprocess" / "preprocess_report.json", "preprocess").read_text())
    scale = {name: v["scale"] for name, v in report["images"].items()}
    out = _stage(root, "curate")

    records = [
        replace(r, subgroup=route_subgroup(r),
                pixel_spacing_mm=None if r.pixel_spacing_mm is None
                else round(r.pixel_spacing_mm / scale[Path(r.path).name], 4))
        for r in records
    ]
    train = [r for r in records if r.split == "train"]
    X = _load_images(root, train).reshape(len(train), -1)

    # label noise: confident learning on single-view training records
    std_idx = [i for i, r in enumerate(train) if r.subgroup == "standard_view" and len(r.labels) == 1]
    classes = sorted({next(iter(train[i].labels)) for i in std_idx})
    flagged: set[str] = set()
    n_pseudo = 0
    if len(classes) > 1 and len({train[i].patient_id for i in std_idx}) >= 5:
        y = np.array([classes.index(next(iter(train[i].labels))) for i in std_idx])
        groups = [train[i].patient_id for i in std_idx]
        oof = oof_probabilities(X[std_idx], y, groups)
        flagged = {train[std_idx[k]].image_id for k in confident_flags(oof, y)}
        # pseudo-labels for the unlabeled subgroup
        unl = [i for i, r in enumerate(train) if r.subgroup == "unlabeled"]
        if unl:
            from sklearn.linear_model import LogisticRegression

            keep = [i for i in std_idx if train[i].image_id not in flagged]
            clf = LogisticRegression(max_iter=1000).fit(X[keep], [classes.index(next(iter(train[i].labels))) for i in keep])
            for i, probs in zip(unl, clf.predict_proba(X[unl])):
                k = pseudo_label(probs, c["pseudo_label_threshold"])
                if k is not None:
                    train[i] = replace(train[i], labels=frozenset({classes[k]}), subgroup="standard_view")
                    n_pseudo += 1
    relabeled = {r.image_id: r for r in train}
    records = [relabeled.get(r.image_id, r) for r in records]
    write_manifest(records, out / "manifest.jsonl")

    tb = TemplateBank.load()
    usable = [r for r in records if r.split == "train" and r.labels and r.image_id not in flagged]
    pools = {r.image_id: caption_pool(r, tb, cfg["pretrain"]["metadata_free_captions"]) for r in usable}
    with open(out / "captions.jsonl", "w") as fh:
        for r in usable:
            fh.write(json.dumps({"image_id": r.image_id, "captions": pools[r.image_id][:5],
                                 "pool": pools[r.image_id]}, sort_keys=True) + "\n")
    shards = build_shards([(r, pools[r.image_id][:5]) for r in usable], c["upsample"], c["shard_size"], cfg["seed"])
    write_shards(shards, out / "shards")
    corpus = sorted({t for p in pools.values() for t in p})
    train_bpe(corpus, c["vocab_size"]).save(out / "vocab.txt")
    _json(out / "curation_report.json", {
        "n_records": len(records), "n_training_pairs": len(usable), "n_shards": len(shards),
        "flagged": sorted(flagged), "n_pseudo_labeled": n_pseudo,
        "subgroups": {g: sum(r.subgroup == g for r in records) for g in sorted({r.subgroup for r in records})},
    })
    return out


def cmd_pretrain(cfg: dict, root: Path, args) -> Path:
    import torch

    from .curation import read_shards
    from .metrics import patient_split
    from .model import DualEncoder, save_checkpoint
    from .pretrain import Checkpoint, select_checkpoint, train
    from .tokenizer import Vocab, encode_batch
    from .zeroshot import class_embeddings, text_encoder_for

    records, pools = _load_curated(root)
    vocab = Vocab.load(root / "curate" / "vocab.txt")
    shards = read_shards(sorted((root / "curate" / "shards").glob("shard_*.jsonl")))
    out = _stage(root, "pretrain")
    mc = cfgmod.model_config(cfg, vocab_size=vocab.vocab_size)
    tc = cfgmod.train_config(cfg)

    # hold out whole patients of the training split for checkpoint selection
    train_recs = [r for r in records if r.split == "train" and r.image_id in pools]
    _, val_p = patient_split([r.patient_id for r in train_recs], [r.view for r in train_recs],
                             cfg["pretrain"]["val_fraction"], cfg["seed"])
    val_p = set(val_p)
    val = [r for r in train_recs if r.patient_id in val_p and r.view in _prompt_bank(cfg)]
    fit_ids = {r.image_id for r in train_recs if r.patient_id not in val_p}
    shards = [[e for e in s if e.image_id in fit_ids] for s in shards]
    shards = [s for s in shards if s]
    if not val:
        raise PipelineError("validation split is empty; raise pretrain.val_fraction or phantom.n_patients")

    fit_records = [r for r in train_recs if r.image_id in fit_ids]
    images = dict(zip([r.image_id for r in fit_records], _load_images(root, fit_records)))
    corpus = sorted({t for i in fit_ids for t in pools[i]})
    tokens = dict(zip(corpus, encode_batch(corpus, vocab, mc.max_tokens)))
    torch.manual_seed(cfg["seed"])
    model = DualEncoder(mc)
    init = Checkpoint(-1, float("nan"), cfg["seed"],
                      state_dict={k: v.detach().clone() for k, v in model.state_dict().items()})
    checkpoints = train(shards, model, tc, images, tokens, checkpoint_dir=out / "checkpoints",
                        log_path=out / "train_log.jsonl", policy=cfgmod.augmentation_policy(cfg),
                        caption_sets={i: pools[i] for i in fit_ids})
    bank = _prompt_bank(cfg)
    best, f1s = select_checkpoint(
        [init] + checkpoints, model, _load_images(root, val), [r.view for r in val],
        lambda m: class_embeddings(bank, text_encoder_for(m, vocab)),
    )
    save_checkpoint(out / "best.pt", model, epoch=best.epoch, loss=best.loss, seed=best.seed)
    _json(out / "selection.json", {
        "epochs": [-1] + [c.epoch for c in checkpoints], "val_macro_f1": f1s, "selected_epoch": best.epoch,
        "train_loss": [c.loss for c in checkpoints], "n_train_pairs": len(fit_ids), "n_val_images": len(val),
    })
    return out


def cmd_zeroshot(cfg: dict, root: Path, args) -> Path:
    from .growth import ellipse_perimeter, load_quantiles
    from .metrics import confusion_matrix, macro_f1
    from .model import embed_images
    from .phantom import head_axes_mm
    from .zeroshot import GAEstimator, class_embeddings, classify_batch, text_encoder_for, validity_report

    records, _ = _load_curated(root)
    model, vocab, _ = _load_model(root)
    out = _stage(root, "zeroshot")
    bank = _prompt_bank(cfg)
    classes = sorted(bank)
    test = [r for r in records if r.split == "test" and r.view in bank]
    if not test:
        raise PipelineError("no test images of the prompted classes")
    emb = embed_images(model, _load_images(root, test))
    pred, _ = classify_batch(emb, class_embeddings(bank, text_encoder_for(model, vocab)))
    truth = [r.view for r in test]
    cm = confusion_matrix(pred, truth, classes)
    per_class = {}
    for k, c in enumerate(classes):
        denom = cm[k].sum() + cm[:, k].sum()
        per_class[c] = float(2 * cm[k, k] / denom) if denom else 0.0
    _json(out / "view_report.json", {
        "classes": classes, "macro_f1": macro_f1(pred, truth, classes), "per_class_f1": per_class,
        "confusion": cm.tolist(), "n_images": len(test), "prompt_style": cfg["zeroshot"]["prompt_style"],
    })

    brain = [i for i, r in enumerate(test) if r.view == "brain" and r.pixel_spacing_mm is not None]
    if brain:
        q = load_quantiles(cfg["zeroshot"]["quantiles_file"])
        true_hc = [float(ellipse_perimeter(*head_axes_mm(test[i].ga_days))) for i in brain]
        ga = {}
        for rule in ("median", "argmax"):
            est = GAEstimator(model, vocab, k=cfg["zeroshot"]["top_k"], rule=rule).fit()
            es = est.estimates(emb[brain], [test[i].pixel_spacing_mm for i in brain])
            rep = validity_report(true_hc, es, q)
            central = [rec["valid"] for i, rec in zip(brain, rep["records"])
                       if 126 <= test[i].ga_days <= 154 and rec.get("valid") is not None]
            ga[rule] = {
                "validity_rate": rep["validity_rate"], "n_evaluated": rep["n_evaluated"],
                "n_excluded": rep["n_excluded"],
                "central_validity_rate": float(np.mean(central)) if central else None,
                "mae_days": float(np.mean([abs(e.ga_days - test[i].ga_days) for i, e in zip(brain, es)])),
            }
        _json(out / "ga_report.json", ga)
    return out


def _view_task_runs(cfg, emb, records, test_patients, jobs, name):
    from .metrics import ProbeDataset, Task, cv_harness, support_set_harness
    from .probes import linear_probe_trainer

    p = cfg["probe"]
    keep = [i for i, r in enumerate(records) if r.view is not None and r.view != "other"]
    labels = [records[i].view for i in keep]
    data = ProbeDataset(emb[keep], labels, [records[i].patient_id for i in keep])
    task = Task("view", "macro_f1", tuple(sorted(set(labels))))
    trainer = linear_probe_trainer(lr=p["lr"], epochs=p["epochs"], l2=p["l2"])
    runs = cv_harness(data, task, trainer, cfg["seed"], p["n_folds"], p["n_seeds"], test_patients,
                      name, jobs, p["timestamps"])
    for n in p["support_sizes"]:
        runs += support_set_harness(data, n, task, trainer, cfg["seed"], n_seeds=p["n_seeds"],
                                    test_patients=test_patients, model_name=name,
                                    n_jobs=jobs, timestamps=p["timestamps"])
    return runs


def _seg_runs(cfg, model, records, name):
    from .metrics import ProbeRun, run_seed
    from .phantom import render_record
    from .probes import SegmentationProbe

    p = cfg["probe"]
    brain = [r for r in records if r.view == "brain"]
    imgs, masks, split = [], [], []
    for r in brain:
        ph = render_record(r)
        img, (head,) = _crop_like_preprocess(ph.rgb, [ph.structures["head"]], cfg["preprocess"]["size"])
        imgs.append(img)
        masks.append(head[None])
        split.append(r.split)
    imgs, masks, split = np.stack(imgs).astype(np.float32), np.stack(masks), np.array(split)
    tr, te = split == "train", split == "test"
    if not tr.any() or not te.any():
        raise PipelineError("segmentation needs brain images in both splits")
    runs = []
    for s in range(p["n_seeds"]):
        probe = SegmentationProbe(model, feature_size=p["seg_feature_size"], epochs=p["seg_epochs"],
                                  seed=run_seed(cfg["seed"], 2000, s) % (2**31)).fit(imgs[tr], masks[tr])
        runs.append(ProbeRun("seg", 0, s, "dsc", probe.score(imgs[te], masks[te]), name, "holdout"))
    return runs


def _chd_runs(cfg, model, out: Path, name):
    from .metrics import ProbeRun, auroc, plot_roc, run_seed
    from .model import embed_images
    from .phantom import PhantomSpec, default_spacing, gen_video
    from .preprocess import extract_fan, standardize
    from .probes import LinearProbe, clip_features, video_scores

    p = cfg["probe"]
    size = cfg["preprocess"]["size"]
    rng = np.random.default_rng([cfg["seed"], 3])
    n = p["chd_videos"]
    chd = np.arange(n) % 2 == 1
    videos = []
    for v in range(n):
        spec = PhantomSpec("heart", int(rng.integers(126, 200)), default_spacing(cfg["phantom"]["size"]),
                           noise_seed=int(rng.integers(2**31)), size=cfg["phantom"]["size"])
        frames = gen_video(spec, int(rng.integers(16, 129)), chd=bool(chd[v]))
        videos.append(np.stack([standardize(extract_fan(f)[0], size) for f in frames]))
    feats, owner = clip_features(videos, lambda x: embed_images(model, x), p["chd_mode"])
    order = rng.permutation(n)
    n_test = max(2, n // 5)
    test_v = set(order[:n_test].tolist())
    if len({bool(chd[v]) for v in test_v}) < 2:
        raise PipelineError("CHD test split holds a single class; raise probe.chd_videos")
    tr = np.array([o not in test_v for o in owner])
    runs, scores = [], None
    for s in range(p["n_seeds"]):
        probe = LinearProbe(lr=p["lr"], epochs=p["epochs"], l2=p["l2"],
                            seed=run_seed(cfg["seed"], 3000, s) % (2**31)).fit(feats[tr], chd[owner[tr]].astype(int))
        probs = probe.predict_proba(feats[~tr])[:, 1]
        scores = video_scores(probs, owner[~tr])
        truth = chd[np.unique(owner[~tr])].astype(int)
        runs.append(ProbeRun("chd", 0, s, "auroc", auroc(scores, truth), name, "holdout"))
    plot_roc(scores, truth, out / "chd_roc.png")
    return runs


def cmd_probe(cfg: dict, root: Path, args) -> Path:
    from .metrics import write_runs
    from .model import embed_images
    from .probes import save_embeddings

    records, _ = _load_curated(root)
    model, _, _ = _load_model(root)
    out = _stage(root, "probe")
    emb = embed_images(model, _load_images(root, records))
    save_embeddings(out / "embeddings.bin", emb)
    (out / "embedding_ids.txt").write_text("".join(r.image_id + "\n" for r in records))
    test_patients = sorted({r.patient_id for r in records if r.split == "test"}) or None
    runs = []
    for task in cfg["probe"]["tasks"]:
        if task == "view":
            runs += _view_task_runs(cfg, emb, records, test_patients, args.jobs, args.model_name)
        elif task == "seg":
            runs += _seg_runs(cfg, model, records, args.model_name)
        elif task == "chd":
            runs += _chd_runs(cfg, model, out, args.model_name)
    write_runs(runs, out / "runs.jsonl")
    return out


def cmd_report(cfg: dict, root: Path, args) -> Path:
    from itertools import combinations

    from .metrics import plot_summary, read_runs, summarize, wilcoxon_signed_rank

    paths = [Path(p) for p in args.runs] if args.runs else [_require(root / "probe" / "runs.jsonl", "probe")]
    runs = [r for p in paths for r in read_runs(p)]
    if not runs:
        raise PipelineError("no probe runs to report")
    out = _stage(root, "report")
    summary = summarize(runs)
    _json(out / "summary.json", summary)
    cols = ["model", "task", "metric", "mode", "support_size", "n_runs", "mean", "std", "median"]
    lines = ["\t".join(cols)] + ["\t".join("" if s[c] is None else (f"{s[c]:.6f}" if isinstance(s[c], float) else str(s[c]))
                                           for c in cols) for s in summary]
    (out / "summary.tsv").write_text("\n".join(lines) + "\n")
    plot_summary(summary, out / "summary.png")

    # paired comparisons between models on identical (task, mode, N, fold, seed) keys
    by_model: dict[str, dict] = {}
    for r in runs:
        by_model.setdefault(r.model, {})[(r.task, r.metric, r.mode, r.support_size, r.fold, r.seed_index)] = r.value
    tests = []
    for a, b in combinations(sorted(by_model), 2):
        shared = sorted(set(by_model[a]) & set(by_model[b]), key=lambda k: tuple(map(str, k)))
        groups: dict[tuple, list[float]] = {}
        for k in shared:
            groups.setdefault(k[:4], []).append(by_model[a][k] - by_model[b][k])
        for key, deltas in sorted(groups.items(), key=lambda kv: tuple(map(str, kv[0]))):
            try:
                pval = wilcoxon_signed_rank(deltas)
            except ValueError as exc:
                pval, note = None, str(exc)
            else:
                note = ""
            tests.append({"model_a": a, "model_b": b, "task": key[0], "metric": key[1], "mode": key[2],
                          "support_size": key[3], "n_pairs": len(deltas), "mean_delta": float(np.mean(deltas)),
                          "p_value": pval, "note": note})
    _json(out / "comparisons.json", tests)
    for name in ("view_report.json", "ga_report.json"):
        src = root / "zeroshot" / name
        if src.exists():
            (out / f"zeroshot_{name}").write_bytes(src.read_bytes())
    return out


def cmd_interpret(cfg: dict, root: Path, args) -> Path:
    from sklearn.metrics import silhouette_score

    from .interpret import project_embeddings, saliency_ratio, save_overlay, scorecam, write_projection
    from .model import embed_images
    from .phantom import render_record
    from .zeroshot import class_embeddings, text_encoder_for

    records, _ = _load_curated(root)
    model, vocab, _ = _load_model(root)
    out = _stage(root, "interpret")
    it = cfg["interpret"]
    bank = _prompt_bank(cfg)
    cls = class_embeddings(bank, text_encoder_for(model, vocab))
    test = [r for r in records if r.split == "test" and r.view in cls]
    if not test:
        raise PipelineError("no test images of the prompted classes")
    # femur images first: their bone mask gives a saliency target
    chosen = sorted(test, key=lambda r: (r.view != "femur", r.image_id))[: it["n_images"]]
    maps = []
    for k, r in enumerate(chosen):
        ph = render_record(r)
        img, (target,) = _crop_like_preprocess(ph.rgb, [ph.structures.get(r.view, np.zeros_like(ph.fan_mask))],
                                               cfg["preprocess"]["size"])
        sal = scorecam(img, cls[r.view], model, it["layer"], it["temperature"])
        save_overlay(out / f"overlay_{k:03d}_{r.view}.png", img, sal)
        entry = {"image_id": r.image_id, "view": r.view}
        if target.any() and (~target & (img > 0)).any():
            entry["saliency_ratio"] = saliency_ratio(sal, target, img > 0)
        maps.append(entry)
    emb = embed_images(model, _load_images(root, test))
    labels = [r.view for r in test]
    xy = project_embeddings(emb, it["projection"], cfg["seed"])
    write_projection(out / "projection.tsv", xy, labels)
    sil = float(silhouette_score(xy, labels)) if len(set(labels)) > 1 else None
    _json(out / "interpret_report.json", {"saliency": maps, "projection": it["projection"],
                                          "silhouette_2d": sil})
    return out


COMMANDS = {
    "phantom": cmd_phantom,
    "preprocess": cmd_preprocess,
    "curate": cmd_curate,
    "pretrain": cmd_pretrain,
    "zeroshot": cmd_zeroshot,
    "probe": cmd_probe,
    "report": cmd_report,
    "interpret": cmd_interpret,
}


# --------------------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out-dir", help=f"output root (default: config data_root or ${cfgmod.DATA_ROOT_ENV})")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers for probe runs")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path config override, repeatable")
    parser = argparse.ArgumentParser(prog="sonoclip", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")
    helps = {
        "phantom": "generate synthetic images and a manifest",
        "preprocess": "inpaint annotations, crop the fan, resize",
        "curate": "subgroups, label-noise filtering, captions, shards, tokenizer",
        "pretrain": "contrastive pretraining and checkpoint selection",
        "zeroshot": "zero-shot view classification and GA estimation",
        "probe": "linear, segmentation and video probes on frozen features",
        "report": "summary tables, plots and paired tests",
        "interpret": "saliency overlays and embedding projection",
    }
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "phantom":
            sp.add_argument("--n-patients", type=int, help="number of phantom patients")
        if name == "probe":
            sp.add_argument("--model-name", default="sonoclip", help="model label written into run records")
        if name == "report":
            sp.add_argument("--runs", nargs="+", help="run files to summarise (default: probe/runs.jsonl)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "n_patients", None) is not None:
        overrides.append(f"phantom.n_patients={args.n_patients}")
    if args.out_dir is not None:
        overrides.append(f"data_root={json.dumps(args.out_dir)}")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = cfgmod.load_config(args.config, overrides)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return 1
    root = Path(cfg["data_root"])
    try:
        stage = COMMANDS[args.command](cfg, root, args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    (stage / "config.yaml").write_text(cfgmod.dump_config(cfg))
    write_artifact_manifest(stage, args.command, cfg)
    print(stage / "artifacts.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
