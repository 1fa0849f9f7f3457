from .data_service import (
    Dataset, Split, load_tabular, derive_last_clicked_context, drop_contexts, filter_dataset,
    leave_one_out_split, load_side_info, dataset_stats
)
from .evaluation_service import Evaluator, RankTask, LongTailFilter, build_tasks, hr_at_k, ndcg_at_k
from .training_service import PositiveIndex, Trainer, sample_negative, bpr_loss, train, first_step_probe

__all__ = [
    "Dataset", "Split", "load_tabular", "derive_last_clicked_context", "drop_contexts", "filter_dataset",
    "leave_one_out_split", "load_side_info", "dataset_stats",
    "Evaluator", "RankTask", "LongTailFilter", "build_tasks", "hr_at_k", "ndcg_at_k",
    "PositiveIndex", "Trainer", "sample_negative", "bpr_loss", "train", "first_step_probe"
]
