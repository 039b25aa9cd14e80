"""Federated learning of connectional brain templates from multi-view connectivity data."""

__version__ = "0.1.0"

from .data import (  # noqa: E402
    BalancedKMeans, FoldSplit, Population, SitePartition, SynthesisSpec, fold_split,
    partition_sites, read_csv_subjects, read_population, synthesize_population, write_population,
)
from .dgn import DeepGraphNormalizer, DgnConfig, dgn_forward, global_cbt, init_dgn, train_dgn  # noqa: E402
from .evaluation import (  # noqa: E402
    centeredness, kl_divergence, one_shot_svm, paired_ttest, significance_stars,
)
from .federation import (  # noqa: E402
    FedConfig, MetaSettings, aggregate, run_ablation, run_fedcbt, run_federated, run_metafedcbt,
    sample_participants,
)
from .generator import ConnectivityGenerator, Metadata, RdgnConfig, sample_noise  # noqa: E402
from .params import ParamVector, load_checkpoint, save_checkpoint  # noqa: E402
from .regressor import MetadataRegressor, build_regressor_corpus, predict_metadata  # noqa: E402
