"""Encode a class-foldered image tree into one embedding file."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from faeb_exporter import formats, images
from faeb_exporter.backbones import get_featurizer

DEFAULT_TEMPLATE = "a picture of a {class}"
DEFAULT_BACKBONE = "ViT-B/32"
CLASS_TOKEN = "{class}"


@dataclass
class ExportJob:
    image_root: str
    out_path: str
    template: str = DEFAULT_TEMPLATE
    backbone: str = DEFAULT_BACKBONE
    batch_size: int = 32
    device: str = "cpu"

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if CLASS_TOKEN not in self.template:
            raise ValueError(
                f"template must contain the literal token {CLASS_TOKEN}")


@dataclass
class ExportReport:
    out_path: str
    class_names: list
    n_images: int
    feature_dim: int
    skipped: list = field(default_factory=list)  # unreadable image paths


def export(job: ExportJob) -> ExportReport:
    """Encode every readable image under job.image_root and write the file.

    Class folders are sorted, so label ids depend only on folder names.
    Unreadable images are skipped and listed in the report; a tree with no
    class folders is an error. Image embeddings are written raw; prompt
    rows are unit-normalized. Batches never straddle classes, and the
    offline featurizer encodes row-wise, so output bytes are independent
    of batch_size.
    """
    job.validate()
    featurizer = get_featurizer(job.backbone, job.device)
    classes = images.scan_image_root(job.image_root)
    names = [name for name, _ in classes]

    chunks = []
    labels = []
    skipped = []
    for label, (_, files) in enumerate(classes):
        batch = []
        for path in files:
            try:
                batch.append(images.load_image(path))
            except (OSError, ValueError):
                skipped.append(str(path))
                continue
            labels.append(label)
            if len(batch) == job.batch_size:
                chunks.append(featurizer.encode_images(np.stack(batch)))
                batch = []
        if batch:
            chunks.append(featurizer.encode_images(np.stack(batch)))

    features = (np.concatenate(chunks, axis=0) if chunks
                else np.empty((0, featurizer.dim)))
    prompts = [job.template.replace(CLASS_TOKEN, name) for name in names]
    bank = featurizer.encode_texts(prompts)
    formats.write_embeddings(job.out_path, names, labels, features, bank)
    return ExportReport(
        out_path=str(job.out_path),
        class_names=names,
        n_images=len(labels),
        feature_dim=featurizer.dim,
        skipped=skipped,
    )
