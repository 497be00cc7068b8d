"""Field-matrixed factorization machines for multi-field categorical data.

One scorer covers the whole constraint family (identity, scalar, diagonal,
and full per-field-pair matrices), plus FFM and plain logistic regression.
On top of the trainer sit three inference optimizations: PCA-selected
per-field embedding dimensions, precomputed intermediate vectors, and
field-shared linear terms.
"""

from .analysis import (
    auc,
    count_params,
    count_params_of,
    cross_dim_map,
    estimate_flops,
    field_pair_mi,
    logloss,
    mi_matrix,
)
from .cache import CachedModel, build_cache, cached_score, cached_score_batch, load_cache, save_cache
from .ingest import (
    Dataset,
    DatasetSplit,
    EncodedInstance,
    expand_avazu_hour,
    read_dataset,
    split_dataset,
    transform_numeric,
    write_dataset,
)
from .model import (
    FieldPairMatrix,
    FmModel,
    LinearMode,
    MatrixKind,
    load_model,
    model_digest,
    pair_score,
    predict_proba,
    predict_proba_batch,
    save_model,
    score,
    score_batch,
    sigmoid,
    transform,
)
from .reduce import DimsPlan, load_dims, pca_field_dims, save_dims, second_pass
from .schema import (
    FieldSchema,
    GlobalFeatureId,
    build_schema,
    encode_row,
    encode_token,
    load_schema,
    save_schema,
    schema_digest,
)
from .synth import SynthData, SynthSpec, generate
from .train import (
    TrainConfig,
    TrainReport,
    TrainingDiverged,
    fit,
    gradients,
    init_model,
    loss,
    make_optimizer,
)

__version__ = "0.1.0"
