"""Command-line entry point: ``splab <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .bench.data import load_dataset, save_dataset
from .bench.metrics import inter_class_similarity, intra_class_similarity
from .bench.protocol import EvalReport, evaluate_cell, worker_count, write_report_csv, write_report_json
from .bench.splits import PROTOCOL_SEEDS, SplitConfig, make_splits
from .bench.synth import FAMILIES, generate_dataset
from .bench.training import PromptCorruption, TrainConfig, evaluate, extract_embeddings, train_detector
from .cpe import CpeConfig, class_prototypes, load_prototypes, save_prototypes
from .detector import Detector, LossWeights, ModelConfig

log = logging.getLogger("splab")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data: str = "data"
    out: str = "out"
    seed: int = 42
    prompt_seed: int = 42
    classes: int = 6
    images: int = 600
    image_size: int = 64
    d: int = 32
    patch: int = 8
    encoder_layers: int = 2
    decoder_layers: int = 3
    k: int = 16
    tau: float = 1.0
    relevance_scale: float = 10.0
    use_spectral: bool = True
    use_pqs: bool = True
    use_cpe: bool = True
    alpha: float = 30.0
    margin: float = 0.5
    clamp_epsilon: float = 1e-7
    w_cls: float = 4.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    w_bce: float = 5.0
    w_dice: float = 5.0
    w_cpe: float = 1.0
    steps: int = 2000
    batch_size: int = 8
    prompt_images_per_class: int = 2
    lr: float = 2e-3
    weight_decay: float = 0.05
    warmup_steps: int = 10
    augment: bool = True
    prompt_count: int = 5
    score_threshold: float = 0.05

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            image_size=self.image_size, patch=self.patch, d=self.d, encoder_layers=self.encoder_layers,
            decoder_layers=self.decoder_layers, k=self.k, use_spectral=self.use_spectral, use_pqs=self.use_pqs,
            tau=self.tau, relevance_scale=self.relevance_scale, seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps, batch_size=self.batch_size, prompt_images_per_class=self.prompt_images_per_class,
            learning_rate=self.lr, weight_decay=self.weight_decay, warmup_steps=self.warmup_steps,
            use_cpe=self.use_cpe, augment=self.augment, seed=self.seed,
            weights=LossWeights(self.w_cls, self.w_l1, self.w_giou, self.w_bce, self.w_dice, self.w_cpe),
            cpe=CpeConfig(self.alpha, self.margin, self.clamp_epsilon),
        )

    def validate(self) -> RunConfig:
        try:
            self.model_config()
            self.train_config()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.classes < 4 or self.classes > len(FAMILIES):
            raise ConfigError(f"classes must lie in [4, {len(FAMILIES)}]")
        return self

    def to_lines(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())


def _coerce(name: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool or kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"invalid value {raw!r} for {name}") from exc


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def build_config(file_values: dict[str, str], overrides: dict[str, str]) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for source in (file_values, overrides):
        for key, raw in source.items():
            if key not in types:
                raise ConfigError(f"invalid config key {key!r}")
            values[key] = _coerce(key, str(raw), types[key])
    return RunConfig(**values).validate()


# -- manifests -----------------------------------------------------------------


def version_string() -> str:
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+g{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(path: Path, command: str, argv: list[str], cfg: RunConfig, seeds: dict, started: float,
                   outputs: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "argv": argv,
        "config": asdict(cfg),
        "seeds": seeds,
        "version": version_string(),
        "wall_time_s": time.perf_counter() - started,
        "outputs": outputs,
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    Path(str(path)[: -len(".json")] + ".cfg").write_text(cfg.to_lines())


# -- subcommands ---------------------------------------------------------------


def _split_seed(text: str | None, default: int) -> int:
    if text is None:
        return default
    value = int(text[4:]) if text.startswith("seed") else int(text)
    if value not in PROTOCOL_SEEDS:
        raise ConfigError(f"split seed must be one of {PROTOCOL_SEEDS}")
    return value


def _float_list(text: str | None, default: list[float]) -> list[float]:
    if text is None:
        return default
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"invalid number list {text!r}") from exc


def cmd_gen_data(args, cfg: RunConfig):
    ds = generate_dataset(list(FAMILIES[: cfg.classes]), cfg.images, cfg.image_size, cfg.seed, patch=cfg.patch)
    out = Path(cfg.out)
    ann = save_dataset(ds, out)
    return out / "manifest.json", {"seed": cfg.seed}, [str(ann)]


def cmd_split(args, cfg: RunConfig):
    ds = load_dataset(cfg.data)
    split = make_splits(ds, SplitConfig(cfg.seed, cfg.prompt_seed), default_count=cfg.prompt_count)
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "class_split_seed": cfg.seed,
        "prompt_seed": cfg.prompt_seed,
        "seen": split.seen,
        "unseen": split.unseen,
        "train_ids": split.train_ids,
        "query_ids": split.query_ids,
        "prompts": {str(c): ids for c, ids in split.allocation.exemplars.items()},
    }
    out.write_text(json.dumps(doc, indent=2))
    return Path(str(out) + ".manifest.json"), {"class_split": cfg.seed, "prompt": cfg.prompt_seed}, [str(out)]


def _train(cfg: RunConfig, ds):
    split = make_splits(ds, SplitConfig(cfg.seed, cfg.prompt_seed), default_count=cfg.prompt_count)

    def progress(step, loss):
        if step % 100 == 0:
            log.info("step %d loss %.4f", step, loss)

    model, tlog = train_detector(ds, split.train_ids, split.seen, cfg.model_config(), cfg.train_config(), progress)
    return model, tlog, split


def cmd_train(args, cfg: RunConfig):
    ds = load_dataset(cfg.data)
    model, tlog, _ = _train(cfg, ds)
    out = Path(args.ckpt or cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    return Path(str(out) + ".manifest.json"), {"class_split": cfg.seed, "train": cfg.seed}, [str(out), str(out) + ".json"]


def _corruption(args, cfg) -> PromptCorruption:
    sigma = _float_list(args.blur_sigma, [0.0])
    jitter = _float_list(args.jitter_iou, [])
    if len(sigma) != 1 or len(jitter) > 1:
        raise ConfigError("extract-prompts takes a single --blur-sigma and at most one --jitter-iou")
    return PromptCorruption(sigma[0], jitter[0] if jitter else None, cfg.prompt_seed)


def cmd_extract_prompts(args, cfg: RunConfig):
    if not args.ckpt:
        raise ConfigError("extract-prompts needs --ckpt")
    ds = load_dataset(cfg.data)
    seed = _split_seed(args.split, cfg.seed)
    model = Detector.load(args.ckpt)
    split = make_splits(ds, SplitConfig(seed, cfg.prompt_seed), default_count=cfg.prompt_count)
    exemplars = {c: split.allocation.exemplars[c] for c in split.unseen}
    protos = class_prototypes(extract_embeddings(model, ds, exemplars, _corruption(args, cfg)))
    out = Path(args.protos or cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_prototypes(out, protos)
    meta = {"class_split_seed": seed, "prompt_seed": cfg.prompt_seed,
            "exemplars": {str(c): ids for c, ids in exemplars.items()}}
    Path(str(out) + ".json").write_text(json.dumps(meta, indent=2))
    return Path(str(out) + ".manifest.json"), {"class_split": seed, "prompt": cfg.prompt_seed}, [str(out)]


def cmd_eval(args, cfg: RunConfig):
    if not args.ckpt or not args.protos:
        raise ConfigError("eval needs --ckpt and --protos")
    ds = load_dataset(cfg.data)
    model = Detector.load(args.ckpt)
    protos = load_prototypes(args.protos)
    meta_path = Path(str(args.protos) + ".json")
    if not meta_path.exists():
        raise FileNotFoundError(f"prototype metadata {meta_path} not found")
    meta = json.loads(meta_path.read_text())
    seed, pseed = meta["class_split_seed"], meta["prompt_seed"]
    split = make_splits(ds, SplitConfig(seed, pseed), default_count=cfg.prompt_count)
    # stored prototypes only: prompt exemplars are never re-encoded here
    result = evaluate(model, ds, split.query_ids, protos, cfg.score_threshold)
    report = EvalReport.from_cells([seed], [pseed], {(seed, pseed): result})
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report_json(report, out)
    write_report_csv(report, out.with_suffix(".csv"))
    print(f"AP50 box {report.mean_box:.4f}  mask {report.mean_mask:.4f}")
    return Path(str(out) + ".manifest.json"), {"class_split": seed, "prompt": pseed}, [str(out)]


LADDER = {
    "base": {"use_spectral": False, "use_cpe": False, "use_pqs": False},
    "+sspe": {"use_spectral": True, "use_cpe": False, "use_pqs": False},
    "+sspe+cpe": {"use_spectral": True, "use_cpe": True, "use_pqs": False},
    "full": {"use_spectral": True, "use_cpe": True, "use_pqs": True},
}
REMOVALS = {"sspe": "use_spectral", "cpe": "use_cpe", "pqs": "use_pqs"}


def ablation_variants(ablate: str | None) -> dict[str, dict]:
    if ablate is None:
        return LADDER
    if ablate == "none":
        return {"full": LADDER["full"]}
    if ablate not in REMOVALS:
        raise ConfigError(f"--ablate must be one of sspe, cpe, pqs, none; got {ablate!r}")
    return {f"full-{ablate}": {**LADDER["full"], REMOVALS[ablate]: False}}


def run_ablation(cfg: RunConfig, ds, variants: dict[str, dict], prompt_seeds=PROTOCOL_SEEDS,
                 models: dict | None = None) -> dict:
    """Train and evaluate each variant on unseen classes; trained models land in ``models`` if given."""
    results = {}
    for name, toggles in variants.items():
        vcfg = replace(cfg, **toggles).validate()
        start = time.perf_counter()
        model, tlog, _ = _train(vcfg, ds)
        if models is not None:
            models[name] = model
        cells = {(cfg.seed, p): evaluate_cell(model, ds, cfg.seed, p, score_threshold=cfg.score_threshold,
                                              prompt_count=cfg.prompt_count) for p in prompt_seeds}
        rep = EvalReport.from_cells([cfg.seed], list(prompt_seeds), cells)
        results[name] = {"toggles": toggles, "ap50_box": rep.mean_box, "ap50_mask": rep.mean_mask,
                         "cells_box": rep.box[0], "cells_mask": rep.mask[0], "seconds": time.perf_counter() - start}
        log.info("%s: AP50 box %.4f mask %.4f", name, rep.mean_box, rep.mean_mask)
    return results


def cmd_ablate(args, cfg: RunConfig):
    ds = load_dataset(cfg.data)
    results = run_ablation(cfg, ds, ablation_variants(args.ablate))
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(results, indent=2))
    for name, r in results.items():
        print(f"{name:12s} AP50 box {r['ap50_box']:.4f}  mask {r['ap50_mask']:.4f}")
    return Path(str(out) + ".manifest.json"), {"class_split": cfg.seed, "train": cfg.seed}, [str(out)]


def robustness_sweep(model, ds, seed: int, sigmas: list[float], ious: list[float], prompt_seeds=PROTOCOL_SEEDS,
                     score_threshold: float = 0.05, prompt_count: int = 5) -> dict:
    def mean_ap(corr):
        cells = [evaluate_cell(model, ds, seed, p, replace(corr, seed=p), score_threshold, prompt_count)
                 for p in prompt_seeds]
        return float(np.mean([c.ap_box for c in cells])), float(np.mean([c.ap_mask for c in cells]))

    out = {"blur": [], "jitter": []}
    for s in sigmas:
        b, m = mean_ap(PromptCorruption(blur_sigma=s))
        out["blur"].append({"sigma": s, "ap50_box": b, "ap50_mask": m})
    for iou in ious:
        b, m = mean_ap(PromptCorruption(jitter_iou=iou))
        out["jitter"].append({"iou": iou, "ap50_box": b, "ap50_mask": m})
    return out


def cmd_robustness(args, cfg: RunConfig):
    if not args.ckpt:
        raise ConfigError("robustness needs --ckpt")
    ds = load_dataset(cfg.data)
    model = Detector.load(args.ckpt)
    seed = _split_seed(args.split, cfg.seed)
    sigmas = _float_list(args.blur_sigma, [0.0, 1.5, 2.0, 2.5, 3.0])
    ious = _float_list(args.jitter_iou, [0.9, 0.5, 0.1])
    result = robustness_sweep(model, ds, seed, sigmas, ious, score_threshold=cfg.score_threshold,
                              prompt_count=cfg.prompt_count)
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(result, indent=2))
    for row in result["blur"]:
        print(f"blur sigma={row['sigma']:<4} AP50 box {row['ap50_box']:.4f}")
    for row in result["jitter"]:
        print(f"jitter IoU={row['iou']:<4} AP50 box {row['ap50_box']:.4f}")
    return Path(str(out) + ".manifest.json"), {"class_split": seed}, [str(out)]


def cmd_analyze(args, cfg: RunConfig):
    if not args.ckpt:
        raise ConfigError("analyze needs --ckpt")
    ds = load_dataset(cfg.data)
    model = Detector.load(args.ckpt)
    # every single-label image of every class contributes its instances
    exemplars = {c: ds.single_label_with(c) for c in range(ds.num_classes)}
    embs = extract_embeddings(model, ds, exemplars)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "embeddings.csv", "w") as fh:
        for e in embs:
            fh.write(",".join([e.source_id, str(e.class_label), *(repr(float(v)) for v in e.vector)]) + "\n")
    groups: dict[int, list] = {}
    for e in embs:
        groups.setdefault(e.class_label, []).append(e.vector)
    sim = intra_class_similarity(groups)
    doc = {
        "intra_class": {str(c): v for c, v in sim.per_class.items()},
        "flagged_singletons": sim.flagged,
        "inter_class": inter_class_similarity(groups) if len(groups) > 1 else None,
        "class_names": ds.class_names,
    }
    (out / "similarity.json").write_text(json.dumps(doc, indent=2))
    for c, v in sim.per_class.items():
        print(f"class {c} ({ds.class_names[c]}): mean intra-class cosine {v:.4f}")
    return out / "manifest.json", {"model": model.config.seed}, [str(out / "embeddings.csv"), str(out / "similarity.json")]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "split": cmd_split,
    "train": cmd_train,
    "extract-prompts": cmd_extract_prompts,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "robustness": cmd_robustness,
    "analyze": cmd_analyze,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splab", description="Visual-prompt defect detection lab")
    parser.add_argument("command", choices=sorted(COMMANDS), help="subcommand to run")
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--seed", type=int, help="dataset / class-split / training seed")
    parser.add_argument("--prompt-seed", type=int, dest="prompt_seed")
    parser.add_argument("--out", help="output path")
    parser.add_argument("--data", help="dataset directory")
    parser.add_argument("--ckpt", help="model checkpoint")
    parser.add_argument("--protos", help="prototype file")
    parser.add_argument("--split", help="class split, e.g. seed42")
    parser.add_argument("--classes", type=int)
    parser.add_argument("--images", type=int)
    parser.add_argument("--steps", type=int)
    parser.add_argument("--ablate", help="sspe|cpe|pqs|none")
    parser.add_argument("--blur-sigma", dest="blur_sigma", help="comma-separated sigmas")
    parser.add_argument("--jitter-iou", dest="jitter_iou", help="comma-separated IoU targets")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 2) if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    started = time.perf_counter()
    try:
        file_values = parse_config_text(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
        overrides = {k: getattr(args, k) for k in ("seed", "prompt_seed", "out", "data", "classes", "images", "steps")
                     if getattr(args, k) is not None}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            key, value = item.split("=", 1)
            overrides[key.strip()] = value
        cfg = build_config(file_values, overrides)
        log.info("using up to %d worker(s)", worker_count())
        manifest, seeds, outputs = COMMANDS[args.command](args, cfg)
        write_manifest(manifest, args.command, argv, cfg, seeds, started, outputs)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"splab: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"splab: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
