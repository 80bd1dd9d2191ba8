"""Continual representation learning with contrastive supervised distillation.

Library surface: datasets and class-incremental splits (`data`), the
embedding model and teacher snapshots (`models`), the loss kernels
(`losses`), the sequential trainer (`training`), cosine-retrieval
evaluation (`evaluate`), and the experiment harness / CLI (`harness`,
`cli`).
"""

from .data import (
    BatchSpec,
    Dataset,
    LabeledBatch,
    Split,
    Task,
    TaskSequence,
    load_dataset,
    make_blobs,
    merge_tasks,
    sample_pk_batch,
    split_even,
    split_half_pretrain,
)
from .evaluate import (
    GalleryIndex,
    RetrievalReport,
    evaluate_split,
    forgetting_curve,
    index_gallery,
    nearest,
    recall_at_k,
)
from .losses import (
    LossWeights,
    cross_entropy,
    csd_loss,
    kd_loss,
    plasticity_loss,
    positive_index,
    stability_loss,
    total_loss,
    triplet_loss,
)
from .models import (
    EmbeddingModel,
    ModelSnapshot,
    extend_classifier,
    load_checkpoint,
    reference_network,
    save_checkpoint,
    snapshot,
)
from .training import TrainConfig, run_sequence, train_task

__version__ = "0.1.0"
