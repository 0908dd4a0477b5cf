"""Two-stage cascaded video classification: a cheap first-stage model scores
everything, an uncertainty gate forwards ambiguous items to an expensive
second stage, and the rest of the package measures, serves, and streams that
cascade (PR metrics, threshold sweeps, an HTTP gateway, and a mini-batch
ingestion pipeline over a key-value index).
"""

from .cascade import (
    BatchReport,
    CascadeResult,
    CascadeScorer,
    Classifier,
    LookupClassifier,
    MissingStage2ScoreError,
    ReplayScorer,
    Stage,
    StageFailureError,
    StaticClassifier,
    classify,
    run_batch,
)
from .core import (
    DatasetError,
    LabeledExample,
    ModelOutput,
    NotNormalizedError,
    OutOfRangeError,
    ProbVector,
    ProbVectorError,
    TooShortError,
    TriageError,
    VideoItem,
    read_dataset,
    validate_prob_vector,
    write_dataset,
)
from .fusion import (
    FeatureBundle,
    FusionClassifier,
    FusionParams,
    FusionScorer,
    forward,
    loss_and_grad,
    train,
)
from .gate import (
    GateAction,
    GateDecision,
    GateKind,
    GatePolicy,
    confidence,
    decide,
    entropy,
)
from .harness import SweepReport, SweepRow, run_eval, run_sweep
from .metrics import (
    MetricReport,
    NoPositivesError,
    OperatingPoint,
    PRCurve,
    beta_variance,
    evaluate_scores,
    f1_best,
    max_beta_variance,
    pr_curve,
    recall_at_precision,
)
from .synth import SynthSpec, generate
from .vmp import (
    Disposition,
    FilterRule,
    IndexService,
    MessageStream,
    PipelineConfig,
    PipelineReport,
    RuleSet,
    run_pipeline,
)

__version__ = "0.1.0"
