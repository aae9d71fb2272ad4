"""dfdlab: a training and evaluation lab for real-vs-fake image classification.

The pipeline: index a corpus (data), plan balanced epochs (data), preprocess
images (preprocess), optionally derive frequency features (spectral), train a
plain or hybrid classifier (models, training, checkpoint), then evaluate and
benchmark it (metrics, evalbench). The cli module exposes all of it as the
``dfdlab`` command.
"""

__version__ = "0.1.0"

from .data import (  # noqa: F401
    DatasetIndex,
    EpochPlan,
    EpochSpec,
    IndexingError,
    IndexReport,
    PlanError,
    SampleRecord,
    build_index,
    fixed_split,
    fraction_split,
    plan_epoch,
)
from .metrics import (  # noqa: F401
    ConfusionCounts,
    MetricsReport,
    ROCCurve,
    accuracy,
    auc,
    confusion_counts,
    f1,
    harmonic_f1,
    metrics_report,
    precision,
    recall,
    roc_curve,
)
from .models import (  # noqa: F401
    Classifier,
    FreqBranchConfig,
    HybridClassifier,
    ModelConfig,
    build_model,
    trainable_parameter_report,
)
from .preprocess import (  # noqa: F401
    DecodeError,
    ImageTensor,
    PreprocessConfig,
    load_and_preprocess,
)
from .spectral import (  # noqa: F401
    ComplexSpectrum,
    SpectralFeatures,
    amplitude_phase,
    fft2,
    inverse_fft2,
    spectral_stack,
)
from .training import (  # noqa: F401
    AmpConfig,
    DynamicLossScaler,
    OptimizerConfig,
    PlateauScheduler,
    SchedulerConfig,
    Trainer,
    TrainingConfig,
    TrainingDivergedError,
    bce_with_logits,
    make_optimizer,
)
