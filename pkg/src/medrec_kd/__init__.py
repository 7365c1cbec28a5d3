"""Medication recommendation student trained by feature-level distillation."""

from .distill import DistillConfig, TeacherFeatureStore, mock_teacher
from .ehr import DatasetSplit, Sample, SynthConfig, generate_synthetic, split_by_patient
from .estimator import MedicationRecommender
from .metrics import evaluate
from .model import StudentConfig, StudentModel
from .trainer import TrainConfig, train_student

__version__ = "0.1.0"

__all__ = ["DistillConfig", "TeacherFeatureStore", "mock_teacher", "DatasetSplit", "Sample",
           "SynthConfig", "generate_synthetic", "split_by_patient", "MedicationRecommender",
           "evaluate", "StudentConfig", "StudentModel", "TrainConfig", "train_student"]
