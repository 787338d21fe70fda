"""Explainable medical-code prediction at desk scale.

A small attention-based multi-label teacher, two explainers (per-code
attention and distillation into sparse linear students), evidence-snippet
extraction, a multi-label metrics battery, and a blinded human-annotation
harness with agreement statistics.
"""

from .numerics import (
    Tensor,
    GradTape,
    Rng,
    softmax_scaled,
    logit_transform,
    expit_transform,
    grad_check,
)
from .corpus import (
    CodeTable,
    Vocabulary,
    Document,
    Corpus,
    IngestConfig,
    PlantedSpec,
    tokenize,
    ingest_corpus,
    build_vocab,
    vectorize_bow,
    generate_planted_corpus,
    save_corpus,
    load_corpus,
)
from .teacher import (
    TeacherConfig,
    TeacherModel,
    Discriminator,
    PriorSampler,
    init_teacher,
    train_teacher,
    embed_code_titles,
    read_document,
    code_attend,
    predict_probs,
    predict_corpus,
    cpm_loss,
    tpm_loss,
    total_loss,
    save_teacher,
    load_teacher,
)
from .explain_attn import AttentionMap, attention_scores, attention_map
from .distill import (
    StudentModels,
    LogitTargets,
    teacher_logits,
    fit_students,
    student_predict,
    project_weights_to_positions,
    save_students,
    load_students,
)
from .snippet import Snippet, extract_snippet
from .metrics import (
    PredictionRun,
    MetricsReport,
    micro_macro_f1,
    precision_at_n,
    auc,
    hierarchical_set_f1,
    compute_report,
)
from .evalsheet import (
    QuestionSheet,
    ExplainerRun,
    AnnotationSet,
    AgreementReport,
    build_question_sheet,
    ingest_annotations,
    informativeness_report,
    jaccard_agreement,
    serve_annotation,
)

__version__ = "0.1.0"
