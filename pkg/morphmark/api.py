__all__ = (
    "evaluate_predictions",
    "generate_dataset",
    "infer_pseudo_labels",
    "load_regnet",
    "render_overlays",
    "run_stage1",
    "run_stage2",
    "save_regnet",
    "write_resolved_config",
)

from dataclasses import asdict
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import torch

from . import c2t, io, stage1, synthbench
from .dataset import Dataset, load_dataset
from .overlay import write_overlay
from .regnet import RegNet
from .settings import DEFAULT_CONFIG, Config, RegnetSettings

RESOLVED_CONFIG = "resolved_config.json"
REGNET_SIDECAR = "regnet.json"
STAGE1_CHECKPOINT = "stage1.ckpt"
STAGE1_LOG = "train_log.jsonl"
PSEUDO_LABELS = "pseudo_labels.csv"
STAGE2_CHECKPOINTS = ("stage2_f.ckpt", "stage2_g.ckpt")
STAGE2_LOG = "c2t_log.jsonl"
PREDICTIONS = "predictions.csv"
REPORT = "report.json"

EpochCallback = Optional[Callable[[Dict[str, Any]], None]]


def _config(config: Config, config_kwargs: Dict[str, Any]) -> Config:
    return Config(config=config, **config_kwargs) if config_kwargs else config


def write_resolved_config(config: Config, output_dir: io.PathLike) -> Path:
    """Writes the flat resolved configuration, which `--config` accepts to reproduce the run."""
    target = io.ensure_output_dir(output_dir) / RESOLVED_CONFIG
    io.write_json(target, config.to_dict())
    return target


def _load(dataset_path: io.PathLike, config: Config) -> Dataset:
    return load_dataset(dataset_path, config.data.exemplar_id)


def generate_dataset(
    output_dir: io.PathLike, config: Config = DEFAULT_CONFIG, **config_kwargs: Any
) -> Dataset:
    """Renders a synthetic benchmark dataset into `output_dir`."""
    config = _config(config, config_kwargs)
    directory = io.ensure_output_dir(output_dir)
    spec = synthbench.SyntheticSpec.from_settings(config.data, config.seed)
    dataset = synthbench.generate(spec, directory, config.threads)
    write_resolved_config(config, directory)
    return dataset


def save_regnet(
    model: RegNet, output_dir: io.PathLike, field_point_sign: int = 1
) -> Tuple[Path, Path]:
    """Writes the registration checkpoint and the `regnet.json` sidecar needed to rebuild it."""
    directory = io.ensure_output_dir(output_dir)
    checkpoint = directory / STAGE1_CHECKPOINT
    io.save_checkpoint(checkpoint, model.state_dict())
    sidecar = directory / REGNET_SIDECAR
    io.write_json(
        sidecar,
        {
            "regnet": {key: _plain(value) for key, value in asdict(model.settings).items()},
            "image_size": list(model.image_size),
            "use_global_alignment": model.use_global_alignment,
            "field_point_sign": field_point_sign,
        },
    )
    return checkpoint, sidecar


def _plain(value: Any) -> Any:
    return list(value) if isinstance(value, tuple) else value


def load_regnet(checkpoint: io.PathLike) -> Tuple[RegNet, int]:
    """Rebuilds a registration network from its checkpoint and sidecar; returns it and its sign."""
    checkpoint_path = io.require(checkpoint, produced_by="train-stage1")
    sidecar = io.read_json(checkpoint_path.parent / REGNET_SIDECAR, produced_by="train-stage1")
    values = dict(sidecar["regnet"])
    values["encoder_channels"] = tuple(values["encoder_channels"])
    model = RegNet(
        RegnetSettings(**values),
        tuple(sidecar["image_size"]),  # type: ignore
        bool(sidecar["use_global_alignment"]),
    )
    model.load_state_dict(io.load_checkpoint(checkpoint_path, produced_by="train-stage1"))
    model.eval()
    return model, int(sidecar["field_point_sign"])


def run_stage1(
    dataset_path: io.PathLike,
    output_dir: io.PathLike,
    config: Config = DEFAULT_CONFIG,
    on_epoch: EpochCallback = None,
    **config_kwargs: Any,
) -> stage1.StageOneResult:
    """Trains stage I and writes its checkpoint, log and pseudo labels into `output_dir`."""
    config = _config(config, config_kwargs)
    dataset = _load(dataset_path, config)
    directory = io.ensure_output_dir(output_dir)
    write_resolved_config(config, directory)
    with io.JsonLinesLog(directory / STAGE1_LOG) as log:
        result = stage1.train_stage1(
            dataset,
            config,
            log=log,
            checkpoint_path=directory / STAGE1_CHECKPOINT,
            on_epoch=on_epoch,
        )
    save_regnet(result.model, directory, result.field_point_sign)
    io.write_labeled_landmarks(directory / PSEUDO_LABELS, result.pseudo_labels)
    return result


def infer_pseudo_labels(
    dataset_path: io.PathLike,
    checkpoint: io.PathLike,
    output_dir: io.PathLike,
    config: Config = DEFAULT_CONFIG,
    **config_kwargs: Any,
) -> Dict[str, torch.Tensor]:
    """Registers the exemplar onto every unlabeled image with a trained checkpoint."""
    config = _config(config, config_kwargs)
    dataset = _load(dataset_path, config)
    model, sign = load_regnet(checkpoint)
    directory = io.ensure_output_dir(output_dir)
    write_resolved_config(config, directory)
    labels = stage1.infer_dataset(model, dataset, config.stage1.batch_size, sign)
    io.write_labeled_landmarks(directory / PSEUDO_LABELS, labels)
    return labels


def run_stage2(
    dataset_path: io.PathLike,
    pseudo_labels: io.PathLike,
    output_dir: io.PathLike,
    config: Config = DEFAULT_CONFIG,
    on_epoch: EpochCallback = None,
    **config_kwargs: Any,
) -> c2t.C2TResult:
    """Co-teaches both detectors on the pseudo labels and writes their predictions."""
    config = _config(config, config_kwargs)
    dataset = _load(dataset_path, config)
    labels = io.read_labeled_landmarks(io.require(pseudo_labels, produced_by="train-stage1"))
    directory = io.ensure_output_dir(output_dir)
    write_resolved_config(config, directory)
    with io.JsonLinesLog(directory / STAGE2_LOG) as log:
        result = c2t.train_c2t(dataset, labels, config, log=log, on_epoch=on_epoch)
    for name, detector in zip(STAGE2_CHECKPOINTS, (result.f, result.g)):
        io.save_checkpoint(directory / name, detector.state_dict())
    io.write_labeled_landmarks(directory / PREDICTIONS, result.predictions)
    return result


def evaluate_predictions(
    dataset_path: io.PathLike,
    predictions: io.PathLike,
    output_dir: Optional[io.PathLike] = None,
    thresholds: Sequence[float] = synthbench.DEFAULT_THRESHOLDS,
    config: Config = DEFAULT_CONFIG,
    **config_kwargs: Any,
) -> synthbench.EvalReport:
    """Scores predictions against every labeled image they cover except the exemplar.

    Writes `report.json` when `output_dir` is given.
    """
    config = _config(config, config_kwargs)
    dataset = _load(dataset_path, config)
    predicted = io.read_labeled_landmarks(io.require(predictions, produced_by="train-stage2"))
    truth = {
        image_id: dataset.truth[image_id]
        for image_id in dataset.unlabeled_ids
        if image_id in dataset.truth
    }
    report = synthbench.evaluate(predicted, truth, thresholds, dataset.pixel_spacing)
    if output_dir is not None:
        directory = io.ensure_output_dir(output_dir)
        write_resolved_config(config, directory)
        io.write_json(directory / REPORT, report.to_dict())
    return report


def render_overlays(
    dataset_path: io.PathLike,
    predictions: io.PathLike,
    output_dir: io.PathLike,
    image_ids: Sequence[str] = (),
    show_truth: bool = True,
    checkpoint: Optional[io.PathLike] = None,
    config: Config = DEFAULT_CONFIG,
    **config_kwargs: Any,
) -> List[Path]:
    """Draws predictions (and truth, when known) over each image.

    With a stage I `checkpoint` the affine and final registrations of the exemplar onto each
    image are written as well.
    """
    config = _config(config, config_kwargs)
    dataset = _load(dataset_path, config)
    predicted = io.read_labeled_landmarks(io.require(predictions))
    directory = io.ensure_output_dir(output_dir)
    write_resolved_config(config, directory)
    model_and_sign = load_regnet(checkpoint) if checkpoint else None
    written = []
    for image_id in image_ids or list(predicted):
        image = dataset.image(image_id)
        truth = dataset.truth.get(image_id) if show_truth else None
        written.append(
            write_overlay(directory / f"{image_id}_overlay.png", image, predicted[image_id], truth)
        )
        if model_and_sign:
            with torch.no_grad():
                cascade = model_and_sign[0](dataset.exemplar_image[None], image[None])
            for name, warped in (("affine", cascade.affine_warped), ("final", cascade.final)):
                target = directory / f"{image_id}_{name}.png"
                io.write_image(target, warped[0, 0])
                written.append(target)
    return written
