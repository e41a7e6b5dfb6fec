"""A configuration small enough to run every command in seconds."""

TINY = {
    "architecture": {"hidden": [32, 32], "time_dim": 8, "emb_dim": 4},
    "schedule": {"T": 50},
    "train": {"epochs": 2, "steps_per_epoch": 20, "batch_size": 64},
    "unlearn": {"steps": 30, "targets": [1]},
    "eval": {"n": 20, "n_seeds": 1, "sw_n": 100, "mi_n": 20, "mi_nodes": 16},
    "mi": {"n_x": 20, "n_eps": 4, "nodes": 16, "density_points": 10},
    "protocol": {"sequential_targets": [1, 2], "relearn_epochs": 2, "relearn_steps_per_epoch": 5,
                 "breakdown_steps": [0, 10, 20]},
}

# the order in which each command finds its inputs from earlier ones
PIPELINE = ["world", "pretrain", "unlearn", "eval", "mi", "sequential", "relearn", "multi", "breakdown",
            "verify-grad"]

EXTRA_ARGS = {"multi": ["--set", "unlearn.targets=[1,2]"]}
