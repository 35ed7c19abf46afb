"""EDA-driven POI selection for Gaussian template attacks on AES."""

from .traces import (
    LeakageModel, Scheme, TraceSet, compute_intermediate, label_traces,
    load_traceset, save_traceset, split_traceset,
)
from .sim import SimConfig, estimate_snr, simulate
from .poi import PoiCandidate, PoiScores, correlation_ranking, select_top_k, snr_ranking
from .templates import (
    KeyGuessingVector, TemplateModel, attack, build_templates, discriminant_score, rank_of_key,
)
from .metrics import GeCurve, boxplot_stats, guessing_entropy, q_tge
from .eda import UmdaConfig, run_umda

__version__ = "0.1.0"
