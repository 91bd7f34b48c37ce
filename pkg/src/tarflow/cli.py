"""Command line: train, sample, eval-bpd, denoise and info."""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence, TypeVar

from pydantic import BaseModel, ValidationError

from tarflow.entities.config import (
    EvaluationConfig,
    GuidanceMode,
    GuidanceSpec,
    ModelConfig,
    PathsConfig,
    RunConfig,
    SamplingConfig,
    TrainingConfig,
)
from tarflow.errors import ConfigError, TarflowError
from tarflow.evaluation.bpd import bpd
from tarflow.events.subscribers import (
    CheckpointSubscriber,
    LossCurveSubscriber,
)
from tarflow.flow.model import TarFlowModel
from tarflow.io.datasets import ingest_dataset, scale_bytes
from tarflow.io.pnm import make_grid, read_image, write_image
from tarflow.repositories.checkpoint_repository import (
    Checkpoint,
    FileCheckpointRepository,
)
from tarflow.sampling.sampler import denoise, sample
from tarflow.settings import TarflowEnv
from tarflow.training.trainer import Trainer
from utils.events.local import LocalPublisher

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
LOSS_FILE = "loss.csv"
CHECKPOINT_DIR = "checkpoints"

M = TypeVar("M", bound=BaseModel)


def _translate(err: ValidationError) -> ConfigError:
    first = err.errors()[0]
    field = ".".join(str(part) for part in first["loc"]) or "config"
    return ConfigError(field, first["msg"])


def _set(raw: dict[str, Any], section: str, key: str, value: Any) -> None:
    if value is not None:
        raw.setdefault(section, {})[key] = value


def _validated(cls: type[M], raw: Any) -> M:
    try:
        return cls.model_validate(raw)
    except ValidationError as err:
        raise _translate(err) from None


def run_config_fields(args: argparse.Namespace) -> dict[str, Any]:
    """JSON config file (optional) with command line overrides applied,
    not yet validated."""
    raw: dict[str, Any] = {}
    if getattr(args, "config", None):
        raw = json.loads(Path(args.config).read_text())
    model = raw.setdefault("model", {})
    if getattr(args, "tag", None):
        try:
            fields = ModelConfig.tag_fields(args.tag)
        except ValueError as err:
            raise ConfigError("model.tag", str(err)) from None
        fields["noise"] = fields["noise"].model_dump(mode="json")
        model.update(fields)
    _set(raw, "model", "image_shape", getattr(args, "image_shape", None))
    _set(raw, "model", "num_classes", getattr(args, "num_classes", None))
    _set(raw, "model", "label_dropout", getattr(args, "label_dropout", None))
    _set(raw, "model", "precision", getattr(args, "precision", None))
    if getattr(args, "vp", False):
        model["vp_mode"] = True
    _set(raw, "training", "epochs", getattr(args, "epochs", None))
    _set(raw, "training", "batch_size", getattr(args, "batch_size", None))
    _set(raw, "training", "seed", getattr(args, "seed", None))
    _set(raw, "training", "learning_rate", getattr(args, "lr", None))
    if getattr(args, "no_flips", False):
        raw.setdefault("training", {})["flips"] = False
    _set(raw, "paths", "dataset", getattr(args, "dataset", None))
    _set(raw, "paths", "labels", getattr(args, "labels", None))
    _set(raw, "paths", "dataset_count", getattr(args, "count", None))
    _set(raw, "paths", "output_dir", getattr(args, "output", None))
    paths = raw.setdefault("paths", {})
    paths.setdefault("output_dir", str(TarflowEnv().OUTPUT_DIR / "default"))
    return raw


def write_config(config: RunConfig, directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / CONFIG_FILE
    path.write_text(config.model_dump_json(indent=2))
    return path


def _load_checkpoint(path: str | Path) -> Checkpoint:
    repository, name = FileCheckpointRepository.for_file(Path(path))
    return repository.load(name)


def cmd_train(args: argparse.Namespace) -> int:
    raw = run_config_fields(args)
    paths = _validated(PathsConfig, raw["paths"])
    training = _validated(TrainingConfig, raw.get("training", {}))
    dataset = ingest_dataset(
        paths.dataset,
        count=paths.dataset_count,
        seed=training.seed,
        labels_path=paths.labels,
    )
    raw["model"].setdefault("image_shape", list(dataset.image_shape))
    config = _validated(RunConfig, raw)
    output = config.paths.output_dir
    write_config(config, output)
    publisher = LocalPublisher()
    resume = args.resume or config.paths.checkpoint
    if resume:
        trainer = Trainer.from_checkpoint(
            _load_checkpoint(resume), config.training, publisher
        )
    else:
        trainer = Trainer(
            TarFlowModel.init(config.model, config.training.seed),
            config.training,
            publisher,
        )
    curve = LossCurveSubscriber(
        publisher, output / LOSS_FILE, start_step=trainer.step
    )
    curve.subscribe(curve.supported_topics)
    saver = CheckpointSubscriber(
        publisher, FileCheckpointRepository(output / CHECKPOINT_DIR)
    )
    saver.subscribe(saver.supported_topics)
    for summary in trainer.fit(dataset, config.training.epochs):
        print(
            f"epoch {summary.epoch}: {summary.nll_per_dim:.4f} nats/dim "
            f"(loss {summary.mean_loss:.4f})"
        )
    return 0


def _guidance(args: argparse.Namespace, model: TarFlowModel) -> GuidanceSpec:
    mode = args.guidance
    if mode is None:
        if args.guidance_w == 0.0 and args.tau == 1.0:
            mode = GuidanceMode.NONE.value
        elif model.config.conditional and args.tau == 1.0:
            mode = GuidanceMode.CONDITIONAL.value
        else:
            mode = GuidanceMode.UNCONDITIONAL.value
    return _validated(
        GuidanceSpec,
        {
            "mode": mode,
            "weight": args.guidance_w,
            "temperature": args.tau,
            "schedule": args.schedule,
            "normalizer": args.normalizer,
        },
    )


def _suffix(channels: int) -> str:
    return ".pgm" if channels == 1 else ".ppm"


def cmd_sample(args: argparse.Namespace) -> int:
    model = _load_checkpoint(args.checkpoint).to_model()
    if args.class_label is not None and not model.config.conditional:
        raise ConfigError(
            "sampling.class_label", "the checkpoint is unconditional"
        )
    guidance = _guidance(args, model)
    if (
        guidance.mode == GuidanceMode.CONDITIONAL
        and not model.config.conditional
    ):
        raise ConfigError(
            "sampling.guidance.mode",
            "conditional guidance needs a class-conditional checkpoint, "
            "use 'none' or 'unconditional'",
        )
    sampling = _validated(
        SamplingConfig,
        {
            "count": args.count,
            "class_label": args.class_label,
            "guidance": guidance,
            "denoise": args.denoise,
            "trajectory": args.trajectory,
            "seed": args.seed,
            "chunk_size": args.chunk_size,
            "denoise_sigma": args.sigma,
        },
    )
    output = Path(args.output)
    paths = PathsConfig(output_dir=output, checkpoint=args.checkpoint)
    write_config(
        RunConfig(model=model.config, sampling=sampling, paths=paths), output
    )
    result = sample(model, sampling)
    ext = _suffix(model.config.image_shape[0])
    for i, image in enumerate(result.images):
        write_image(image, output / f"sample-{i:04d}{ext}")
        if result.trajectories is not None:
            for j, frame in enumerate(result.trajectories):
                name = f"sample-{i:04d}-frame-{j:02d}{ext}"
                write_image(frame[i], output / name)
    write_image(make_grid(result.images), output / f"grid{ext}")
    logger.info(f"wrote {len(result.images)} samples to {output}")
    return 0


def cmd_eval_bpd(args: argparse.Namespace) -> int:
    model = _load_checkpoint(args.checkpoint).to_model()
    evaluation = _validated(
        EvaluationConfig,
        {"draws_per_example": args.draws, "seed": args.seed},
    )
    paths = _validated(
        PathsConfig,
        {
            "dataset": args.dataset,
            "labels": args.labels,
            "dataset_count": args.count,
            "checkpoint": args.checkpoint,
        },
    )
    dataset = ingest_dataset(
        paths.dataset, count=paths.dataset_count, labels_path=paths.labels
    )
    report = bpd(
        dataset,
        model,
        draws_per_example=evaluation.draws_per_example,
        seed=evaluation.seed,
    )
    rendered = report.model_dump_json(indent=2)
    if args.output:
        target = Path(args.output)
        paths = paths.model_copy(update={"output_dir": target.parent})
        config = RunConfig(
            model=model.config, evaluation=evaluation, paths=paths
        )
        write_config(config, target.parent)
        target.write_text(rendered)
    print(rendered)
    return 0


def cmd_denoise(args: argparse.Namespace) -> int:
    model = _load_checkpoint(args.checkpoint).to_model()
    image = scale_bytes(read_image(Path(args.input)))
    if image.shape != model.config.image_shape:
        raise ConfigError(
            "input",
            f"image is {image.shape}, checkpoint models "
            f"{model.config.image_shape}",
        )
    sampling = _validated(
        SamplingConfig,
        {
            "count": 1,
            "class_label": args.class_label,
            "denoise_sigma": args.sigma,
        },
    )
    target = Path(args.output)
    paths = PathsConfig(output_dir=target.parent, checkpoint=args.checkpoint)
    write_config(
        RunConfig(model=model.config, sampling=sampling, paths=paths),
        target.parent,
    )
    clean = denoise(
        model,
        image,
        sigma=sampling.denoise_sigma,
        labels=sampling.class_label,
    )
    write_image(clean, target)
    logger.info(f"wrote denoised image to {target}")
    return 0


def cmd_info(args: argparse.Namespace) -> int:
    checkpoint = _load_checkpoint(args.checkpoint)
    model = checkpoint.to_model()
    info = {
        "tag": checkpoint.config.tag,
        "image_shape": list(checkpoint.config.image_shape),
        "num_classes": checkpoint.config.num_classes,
        "vp_mode": checkpoint.config.vp_mode,
        "parameters": model.parameter_count,
        "step": checkpoint.step,
        "epoch": checkpoint.epoch,
        "best_loss": checkpoint.best_loss,
    }
    print(json.dumps(info, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tarflow",
        description="Transformer autoregressive flows: train, sample, "
        "evaluate.",
    )
    parser.add_argument("--verbose", "-v", action="store_true")
    parser.add_argument(
        "--deterministic",
        action="store_true",
        help="Single-threaded numerics for bit-identical runs.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="Train a model.")
    train.add_argument("--config", help="RunConfig JSON file.")
    train.add_argument("--tag", help="Model tag such as 2-64-2-2-gauss0.05.")
    train.add_argument(
        "--image-shape", type=int, nargs=3, metavar=("C", "H", "W")
    )
    train.add_argument("--dataset", help="IDX file, image dir or generator.")
    train.add_argument("--labels", help="IDX label file.")
    train.add_argument("--count", type=int, help="Generator dataset size.")
    train.add_argument("--num-classes", type=int)
    train.add_argument("--label-dropout", type=float)
    train.add_argument("--precision", choices=["float32", "float64"])
    train.add_argument("--vp", action="store_true", help="VP ablation.")
    train.add_argument("--epochs", type=int)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--lr", type=float, help="Peak learning rate.")
    train.add_argument("--seed", type=int)
    train.add_argument("--no-flips", action="store_true")
    train.add_argument("--output", help="Run directory.")
    train.add_argument("--resume", help="Checkpoint to resume from.")
    train.set_defaults(handler=cmd_train)

    sample = commands.add_parser("sample", help="Draw samples.")
    sample.add_argument("--checkpoint", required=True)
    sample.add_argument("--count", type=int, default=16)
    sample.add_argument("--class", dest="class_label", type=int)
    sample.add_argument(
        "--guidance", choices=[m.value for m in GuidanceMode]
    )
    sample.add_argument("--guidance-w", type=float, default=0.0)
    sample.add_argument("--tau", type=float, default=1.0)
    sample.add_argument(
        "--schedule", choices=["uniform", "linear"], default="uniform"
    )
    sample.add_argument(
        "--normalizer", choices=["positions", "blocks"], default="positions"
    )
    sample.add_argument(
        "--denoise", action=argparse.BooleanOptionalAction, default=True
    )
    sample.add_argument("--trajectory", action="store_true")
    sample.add_argument("--seed", type=int, default=0)
    sample.add_argument("--chunk-size", type=int)
    sample.add_argument("--sigma", type=float, help="Denoising sigma.")
    sample.add_argument("--output", default="samples")
    sample.set_defaults(handler=cmd_sample)

    evaluate = commands.add_parser("eval-bpd", help="Bits per dimension.")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--dataset", required=True)
    evaluate.add_argument("--labels")
    evaluate.add_argument("--count", type=int, default=1024)
    evaluate.add_argument("--draws", type=int, default=1)
    evaluate.add_argument("--seed", type=int, default=0)
    evaluate.add_argument("--output", help="Write the JSON report here.")
    evaluate.set_defaults(handler=cmd_eval_bpd)

    denoise = commands.add_parser("denoise", help="Tweedie-denoise an image.")
    denoise.add_argument("--checkpoint", required=True)
    denoise.add_argument("--input", required=True)
    denoise.add_argument("--output", required=True)
    denoise.add_argument("--sigma", type=float)
    denoise.add_argument("--class", dest="class_label", type=int)
    denoise.set_defaults(handler=cmd_denoise)

    info = commands.add_parser("info", help="Describe a checkpoint.")
    info.add_argument("--checkpoint", required=True)
    info.set_defaults(handler=cmd_info)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    try:
        return args.handler(args)
    except ConfigError as err:
        logger.error(str(err))
        print(f"error: {err}", file=sys.stderr)
        return 2
    except TarflowError as err:
        logger.error(f"{type(err).__name__}: {err}")
        print(f"error: {err}", file=sys.stderr)
        return 1
