"""Bayesian bipartite record linkage with informed matching updates."""
from .data import (
    IngestionError,
    default_field_theta,
    generate_synthetic,
    generate_with_counts,
    read_csv_pair,
    write_dataset_csv,
    write_matching_csv,
    write_pair_probabilities,
)
from .model import (
    DEFAULT_BETA,
    MOVE_TYPES,
    BruteForcePosterior,
    Matching,
    MatchingTarget,
    RLDataset,
    RLHyperState,
    brute_force_posterior,
    count_matchings,
    enumerate_matchings,
    field_scores,
    gibbs_update_hyper,
    log_likelihood,
    log_match_constant,
    log_prior_matching,
    match_score,
    matching_base_move,
    truncated_gamma,
)
from .sampler import BlockSampler, RLConfig, RLResult, block_select, lb_matching_step, run_rl_sampler

__all__ = [
    "IngestionError",
    "default_field_theta",
    "generate_synthetic",
    "generate_with_counts",
    "read_csv_pair",
    "write_dataset_csv",
    "write_matching_csv",
    "write_pair_probabilities",
    "DEFAULT_BETA",
    "MOVE_TYPES",
    "BruteForcePosterior",
    "Matching",
    "MatchingTarget",
    "RLDataset",
    "RLHyperState",
    "brute_force_posterior",
    "count_matchings",
    "enumerate_matchings",
    "field_scores",
    "gibbs_update_hyper",
    "log_likelihood",
    "log_match_constant",
    "log_prior_matching",
    "match_score",
    "matching_base_move",
    "truncated_gamma",
    "BlockSampler",
    "RLConfig",
    "RLResult",
    "block_select",
    "lb_matching_step",
    "run_rl_sampler",
]
