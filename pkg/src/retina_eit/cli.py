"""Command-line interface: ``retina-eit <command> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from . import ensemble as E
from .data import SplitManifest, load_dataset, resize, save_dataset, stratified_split, synth_generate
from .errors import ConfigError, ContractError, EitError, ValidationError
from .explain import grad_cam, overlay_png
from .models import VARIANTS, ModelConfig, build_model
from .pipeline import metrics_report, run_pipeline, train_variant
from .trainer import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

log = logging.getLogger("retina_eit")

_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} - {"variant", "preset", "seed", "n_classes"}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed"}
_RUN_KEYS = {"step", "n_per_class"}


class UsageError(Exception):
    """Bad flags or configuration; exits with status 2."""

    kind = "usage"


@dataclasses.dataclass
class RunConfig:
    command: str
    preset: str
    seed: int
    threads: int
    model: dict
    train: dict
    run: dict
    args: dict

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_preset(self.preset, seed=self.seed, **self.train)

    def header(self) -> str:
        """Comment lines prepended to text reports."""
        return "# " + json.dumps(dataclasses.asdict(self), sort_keys=True) + "\n"


def parse_overrides(pairs: list[str]) -> tuple[dict, dict, dict]:
    model, train, run = {}, {}, {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        key = key.strip()
        if not sep or not key:
            raise UsageError(f"--config expects key=value, got '{pair}'")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        if key in _MODEL_KEYS:
            model[key] = value
        elif key in _TRAIN_KEYS:
            train[key] = value
        elif key in _RUN_KEYS:
            run[key] = value
        else:
            known = ", ".join(sorted(_MODEL_KEYS | _TRAIN_KEYS | _RUN_KEYS))
            raise UsageError(f"unknown config key '{key}' (known: {known})")
    return model, train, run


def read_config_file(path) -> list[str]:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    pairs = []
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got '{line}'")
        pairs.append(line)
    return pairs


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", choices=("paper", "desk"), default="desk")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="BLAS thread cap (default 1)")
    common.add_argument("--config", action="append", default=[], metavar="KEY=VALUE",
                        help="override a model/training setting; value parsed as JSON when possible")
    common.add_argument("--config-file", metavar="PATH",
                        help="key=value lines; --config pairs override them")
    common.add_argument("--out", help="output path (file or directory, per command)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="retina-eit", description="Transformer ensemble toolkit for fundus grading.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic fundus dataset")
    s.add_argument("--n-per-class", type=int, default=30)

    s = sub.add_parser("train", parents=[common], help="train one variant")
    s.add_argument("variant", choices=VARIANTS)
    s.add_argument("--data", required=True)
    s.add_argument("--split", help="split manifest JSON (default: stratified split from --seed)")
    s.add_argument("--teacher", help="teacher checkpoint for deit (default: train a ViT first)")
    s.add_argument("--no-pretrain", action="store_true", help="beit: skip tokenizer and masked pre-training")
    s.add_argument("--resume", help="resume from the '<out>.resume' state file of an earlier run")

    for name, helptext in (("eval", "metric report for one checkpoint"), ("predict", "write a prediction set")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--ckpt", nargs="+" if name == "predict" else None, required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--split", help="split manifest JSON; restricts to --subset")
        s.add_argument("--subset", choices=("train", "val", "test"), default="test")
        if name == "predict":
            s.add_argument("--labels-out", help="also write a sample_id,label file")

    s = sub.add_parser("ensemble", parents=[common], help="combine a prediction set")
    s.add_argument("--preds", nargs="+", required=True)
    s.add_argument("--labels", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--alpha", type=_floats)
    g.add_argument("--vote", action="store_true")
    s.add_argument("--table", action="store_true", help="append the per-subset table (weights tuned per subset)")
    s.add_argument("--step", type=float, default=0.05)

    s = sub.add_parser("gridsearch", parents=[common], help="tune ensemble weights on a lattice")
    s.add_argument("--preds", nargs="+", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--step", type=float, default=0.05)

    s = sub.add_parser("gradcam", parents=[common], help="saliency overlay for one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--class", dest="target_class", type=int, required=True)

    s = sub.add_parser("sweep-heads", parents=[common], help="accuracy versus number of heads")
    s.add_argument("--data", required=True)
    s.add_argument("--heads", type=_ints, default=[2, 4, 6])
    s.add_argument("--variant", choices=VARIANTS, default="vit")

    s = sub.add_parser("pipeline", parents=[common], help="synth, train all variants, ensemble and evaluate")
    s.add_argument("--n-per-class", type=int, default=30)
    s.add_argument("--step", type=float, default=0.05)
    return p


def _require_out(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command} needs --out")
    return Path(args.out)


def _write_report(path: Path, header: str, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(header + text + "\n")


def _load_subset(args, cfg: RunConfig, side: int):
    ds = load_dataset(args.data, side=side)
    if args.split:
        split = SplitManifest.load(args.split)
        ds = ds.subset(getattr(split, args.subset))
    return ds


# -- commands ------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> str:
    out = _require_out(args)
    ds = synth_generate(args.n_per_class, cfg.seed)
    save_dataset(ds, out)
    return f"wrote {len(ds)} images to {out} (per class {ds.class_counts().tolist()})"


def cmd_train(args, cfg: RunConfig) -> str:
    out = _require_out(args)
    tc = cfg.train_config()
    mc = ModelConfig.from_preset(cfg.preset, args.variant, seed=cfg.seed, **cfg.model)
    ds = load_dataset(args.data, side=mc.image_side)
    split = SplitManifest.load(args.split) if args.split else stratified_split(ds, cfg.seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    split.save(out.with_name(out.name + ".split.json"))
    teacher = load_checkpoint(args.teacher).build_model() if args.teacher else None
    # per-epoch state (optimiser, rng, best weights) lives beside the final model
    state_path = out.with_name(out.name + ".resume")
    if args.resume:
        ck = load_checkpoint(args.resume)
        if ck.optimizer is None or ck.rng_state is None:
            raise UsageError(f"{args.resume} holds no training state; resume from the '.resume' file")
        model = build_model(ModelConfig.from_dict(ck.config))
        if args.variant == "deit" and teacher is None:
            raise UsageError("resuming deit needs --teacher")
        history = train(model, ds, split, tc, teacher=teacher, resume=ck, checkpoint_path=state_path)
        extra = {}
    else:
        tm = train_variant(args.variant, ds, split, cfg.preset, tc, cfg.model, teacher=teacher,
                           pretrain=not args.no_pretrain, checkpoint_path=state_path)
        model, history, extra = tm.model, tm.history, tm.extra
    save_checkpoint(out, model, epoch=len(history.train_acc), extra={"history": history.to_dict(), **{
        k: v for k, v in extra.items() if k.startswith("tokenizer_hash")}})
    out.with_name(out.name + ".history.json").write_text(json.dumps(history.to_dict(), indent=2) + "\n")
    best = history.best_epoch
    return (f"{args.variant}: {len(history.train_acc)} epochs, best epoch {best}, "
            f"train acc {history.train_acc[best]:.4f}, val acc {history.val_acc[best]:.4f} -> {out}")


def cmd_eval(args, cfg: RunConfig) -> str:
    ck = load_checkpoint(args.ckpt)
    model = ck.build_model()
    ds = _load_subset(args, cfg, model.config.image_side)
    text, summary, pc = metrics_report(ds.labels, model.predict(ds.images))
    if args.out:
        from .metrics import write_metrics_csv
        out = Path(args.out)
        _write_report(out.with_suffix(".txt"), cfg.header(), text)
        write_metrics_csv(summary, pc, out.with_suffix(".csv"))
    return text


def cmd_predict(args, cfg: RunConfig) -> str:
    out = _require_out(args)
    models, ds = {}, None
    for path in args.ckpt:
        name = Path(path).stem
        if name in models:
            raise UsageError(f"two checkpoints share the name '{name}'")
        models[name] = load_checkpoint(path).build_model()
    sides = {m.config.image_side for m in models.values()}
    if len(sides) != 1:
        raise ConfigError(f"checkpoints disagree on image side: {sorted(sides)}")
    ds = _load_subset(args, cfg, sides.pop())
    preds = E.PredictionSet.from_models({k: m.predict_proba(ds.images) for k, m in models.items()}, ds.ids)
    out.parent.mkdir(parents=True, exist_ok=True)
    E.write_predictions(preds, out)
    if args.labels_out:
        E.write_labels(ds.ids, ds.labels, args.labels_out)
    return f"wrote {preds.n_models} x {preds.n_samples} predictions to {out}"


def _preds_and_labels(args):
    preds = E.read_predictions(*args.preds)
    _, labels = E.read_labels(args.labels, preds.sample_ids)
    return preds, labels


def cmd_ensemble(args, cfg: RunConfig) -> str:
    preds, labels = _preds_and_labels(args)
    if args.vote:
        pred, how = E.majority_vote_predict(preds), "majority vote"
    else:
        try:
            E.check_alpha(args.alpha, preds.n_models)
        except (ContractError, ValidationError) as exc:
            raise UsageError(f"--alpha: {exc}") from None
        pred = E.weighted_mean_predict(preds, args.alpha)
        how = "weighted mean, alpha = " + ",".join(f"{a:g}" for a in args.alpha)
    text, summary, pc = metrics_report(labels, pred)
    text = f"{how} over {', '.join(preds.model_names)}\n\n{text}"
    if args.table:
        rows = E.ensemble_report(preds, labels, args.step)
        text += "\n\n" + E.format_report(rows)
    if args.out:
        out = Path(args.out)
        _write_report(out.with_suffix(".txt"), cfg.header(), text)
        E.write_labels(preds.sample_ids, pred, out.with_suffix(".labels.csv"))
        if args.table:
            E.report_csv(rows, out.with_suffix(".table.csv"))
    return text


def cmd_gridsearch(args, cfg: RunConfig) -> str:
    preds, labels = _preds_and_labels(args)
    res = E.grid_search_alpha(preds, labels, args.step)
    weights = ", ".join(f"{n}={a:.2f}" for n, a in zip(preds.model_names, res.alpha))
    text = (f"step {args.step} over {res.n_points} lattice points\nalpha* = {weights}\n"
            f"accuracy = {100 * res.accuracy:.2f}%")
    if res.n_optimal > 1:
        text += f" ({res.n_optimal} lattice points tie at the optimum)"
    if args.out:
        _write_report(Path(args.out), cfg.header(), text)
    return text


def cmd_gradcam(args, cfg: RunConfig) -> str:
    out = _require_out(args)
    model = load_checkpoint(args.ckpt).build_model()
    with Image.open(args.image) as im:
        pixels = np.asarray(im.convert("RGB"))
    side = model.config.image_side
    if pixels.shape[:2] != (side, side):
        pixels = resize(pixels, side)
    sal = grad_cam(model, pixels, args.target_class)
    out.parent.mkdir(parents=True, exist_ok=True)
    overlay_png(pixels, sal, out)
    grid = "\n".join(" ".join(f"{v:.3f}" for v in row) for row in sal.grid)
    return f"class {args.target_class} saliency grid:\n{grid}\n-> {out}"


def sweep_dim(dim: int, heads: int) -> int:
    """Smallest width >= ``dim`` divisible by ``heads``."""
    return int(math.ceil(dim / heads) * heads)


def cmd_sweep_heads(args, cfg: RunConfig) -> str:
    tc = cfg.train_config()
    base = ModelConfig.from_preset(cfg.preset, args.variant, **cfg.model)
    ds = load_dataset(args.data, side=base.image_side)
    split = stratified_split(ds, cfg.seed)
    lines = [f"{'heads':>5}  {'dim':>4}  {'val_acc%':>8}  {'test_acc%':>9}"]
    for h in args.heads:
        if h <= 0:
            raise UsageError(f"head count must be positive, got {h}")
        overrides = dict(cfg.model, heads=h, dim=sweep_dim(base.dim, h))
        tm = train_variant(args.variant, ds, split, cfg.preset, tc, overrides)
        val = evaluate(tm.model, ds.subset(split.val))[0]
        test = evaluate(tm.model, ds.subset(split.test))[0]
        lines.append(f"{h:>5}  {overrides['dim']:>4}  {100 * val:>8.2f}  {100 * test:>9.2f}")
    text = "\n".join(lines)
    if args.out:
        _write_report(Path(args.out), cfg.header(), text)
    return text


def cmd_pipeline(args, cfg: RunConfig) -> str:
    out = _require_out(args)
    n = int(cfg.run.get("n_per_class", args.n_per_class))
    step = float(cfg.run.get("step", args.step))
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_manifest.json").write_text(json.dumps(dataclasses.asdict(cfg), indent=2, sort_keys=True) + "\n")
    res = run_pipeline(out, n, cfg.seed, cfg.preset, step, cfg.train, cfg.model, header=cfg.header())
    return (out / "ensemble_report.txt").read_text().split("\n", 1)[1].rstrip() + \
        "\n\ntest accuracy: " + ", ".join(f"{k}={100 * v:.2f}%" for k, v in res.test_accuracy.items())


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
    "ensemble": cmd_ensemble, "gridsearch": cmd_gridsearch, "gradcam": cmd_gradcam,
    "sweep-heads": cmd_sweep_heads, "pipeline": cmd_pipeline,
}


def _one_line(exc: BaseException) -> str:
    kind = getattr(exc, "kind", type(exc).__name__)
    return f"error: {kind}: " + " ".join(str(exc).split())


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        pairs = read_config_file(args.config_file) if args.config_file else []
        model, train, run = parse_overrides(pairs + args.config)
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        plain = {k: v for k, v in vars(args).items()
                 if k not in ("command", "preset", "seed", "threads", "config", "config_file", "verbose")}
        cfg = RunConfig(args.command, args.preset, args.seed, args.threads, model, train, run, plain)
        cfg.train_config()  # validates training keys early
        log.info("resolved config: %s", json.dumps(dataclasses.asdict(cfg), sort_keys=True))
        with threadpool_limits(limits=args.threads):
            print(COMMANDS[args.command](args, cfg))
    except (UsageError, ConfigError) as exc:
        print(f"{parser.prog}: " + _one_line(exc), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure becomes one stderr line
        if not isinstance(exc, (EitError, OSError)):
            log.debug("unexpected failure", exc_info=True)
        print(f"{parser.prog}: " + _one_line(exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
