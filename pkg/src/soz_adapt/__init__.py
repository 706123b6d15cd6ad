"""Cross-patient adaptation for SOZ window classification: a numpy autodiff core,
a 1D-CNN, MMD-based patient weighting and a leave-one-patient-out driver."""
from .cohort import Cohort, PatientRecord, SynthParams, load_cohort, save_cohort, synth_cohort
from .mmd import KernelSpec, WeightTable, compute_weight_table, mmd2_biased, patient_weights
from .model import SozNet, SozNetConfig, build, load_checkpoint, save_checkpoint
from .pipeline import ExperimentReport, TrainConfig, evaluate, finetune, pretrain, run_lopo

__version__ = "0.1.0"
