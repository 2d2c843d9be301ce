
__version__ = '0.1.0'

# Identifier written into checkpoint headers. Loaders refuse files with a
# different format string or a newer format version.
CHECKPOINT_FORMAT  = 'flowsac-checkpoint'
CHECKPOINT_VERSION = 1

# Column layout of the training log. Changing the order breaks downstream plot
# recipes, so new columns go at the end.
TRAIN_LOG_COLUMNS = [
    'episode',
    'eval_return_mean',
    'eval_return_stderr',
    'loss_q',
    'loss_pi',
    'weight_entropy',
    'grad_norm_q',
    'grad_norm_pi'
]

ISFM_BENCH_COLUMNS = ['N', 'sampling_sigma', 'D4_estimate', 'mean_W2sq', 'std_W2sq']

EVAL_SUMMARY_COLUMNS = [
    'alpha',
    'n_states',
    'mean_dist_mean',
    'mean_dist_std',
    'cov_dist_mean',
    'cov_dist_std'
]
