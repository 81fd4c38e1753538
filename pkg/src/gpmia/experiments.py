"""Built-in reproducible experiment configs.

``exp1`` / ``exp2``: two-cluster synthetic members (sep 1.0) against distinct
non-members (sep 5.0, 20% label flips, 80/20 imbalance); ``exp2`` adds a
closer non-member group (sep 3.0, balanced). Both are tested on a member
subset, a fresh draw from the member distribution and an intermediate set
(sep 3.0, 20% flips, 80/20).

``fraud``: an imbalanced tabular surrogate, balanced by down-sampling the
majority class, split 60/20/20; members come from the training split and
non-members from the test split; 20% of units are held out for validation.
"""
import copy

_MEMBER = {"synthetic": {"n_samples": 2000, "n_features": 10, "class_sep": 1.0,
                         "flip_prob": 0.0, "class_weights": [0.5, 0.5]}}
_DISTINCT = {"synthetic": {"n_samples": 2000, "n_features": 10, "class_sep": 5.0,
                           "flip_prob": 0.2, "class_weights": [0.8, 0.2]}}
_INTERMEDIATE = {"synthetic": {"n_samples": 2000, "n_features": 10, "class_sep": 3.0,
                               "flip_prob": 0.2, "class_weights": [0.8, 0.2]}}
_CLOSER = {"synthetic": {"n_samples": 2000, "n_features": 10, "class_sep": 3.0,
                         "flip_prob": 0.2, "class_weights": [0.5, 0.5]}}
_RESAMPLED = copy.deepcopy(_MEMBER)

EXP1 = {
    "seed": 0,
    "target": {
        "hidden_dims": [64, 32],
        "activation": "relu",
        "train": {"epochs": 60, "batch_size": 32, "learning_rate": 1e-3, "optimizer": "adam"},
    },
    "data": {
        "member": _MEMBER,
        "train_groups": [
            {"name": "member", "source": "member", "label": 1, "units": 40},
            {"name": "non_member", "source": _DISTINCT, "label": 0, "units": 40},
        ],
        "test_groups": [
            {"name": "member_subset", "source": "member", "label": 1, "units": 20},
            {"name": "resampled", "source": _RESAMPLED, "label": 1, "units": 20},
            {"name": "intermediate", "source": _INTERMEDIATE, "label": 0, "units": 20},
        ],
    },
    "units": {"size": 30, "disjoint": False, "stratified": False},
    "features": {"families": ["common"], "finetune_epochs": 5},
    "gp": {"steps": 300},
    "eval": {"fpr_targets": [0.01, 0.05, 0.1], "threshold": 0.5},
}

EXP2 = copy.deepcopy(EXP1)
EXP2["data"]["train_groups"].append(
    {"name": "non_member_closer", "source": _CLOSER, "label": 0, "units": 40})

_FRAUD_BASE = {"synthetic": {"n_samples": 20000, "n_features": 20, "class_sep": 1.0,
                             "flip_prob": 0.0, "class_weights": [0.975, 0.025], "seed": "fraud"},
               "balance": True}

FRAUD = {
    "seed": 0,
    "target": {
        "hidden_dims": [64, 32],
        "activation": "relu",
        "train": {"epochs": 200, "batch_size": 32, "learning_rate": 1e-3, "optimizer": "adam"},
    },
    "data": {
        "member": dict(_FRAUD_BASE, split={"fractions": [0.6, 0.2, 0.2], "part": 0}),
        "train_groups": [
            {"name": "member", "source": "member", "label": 1, "units": 200},
            {"name": "non_member", "source": dict(_FRAUD_BASE, split={"fractions": [0.6, 0.2, 0.2], "part": 2}),
             "label": 0, "units": 200},
        ],
        "test_groups": [],
    },
    "units": {"size": 50, "disjoint": False, "stratified": True},
    "features": {"families": ["common"], "finetune_epochs": 5},
    "gp": {"steps": 300, "holdout_fraction": 0.2},
    "eval": {"fpr_targets": [0.01, 0.05, 0.1], "threshold": 0.5},
}

BUILTIN = {"exp1": EXP1, "exp2": EXP2, "fraud": FRAUD}


def builtin(name: str) -> dict:
    return copy.deepcopy(BUILTIN[name])
