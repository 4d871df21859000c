# Displayed name -> key used by the library and the CLI

names_to_measures = {
    "Normalised mutual information": "nmi",
    "Cosine similarity": "cosine",
    "Euclidean distance (RBF)": "euclidean-rbf",
    "Mahalanobis distance (RBF)": "mahalanobis-rbf",
}

measures_to_names = {v: k for k, v in names_to_measures.items()}

MEASURE_KEYS = tuple(names_to_measures.values())

names_to_methods = {
    "Manifold alignment merging (iterative)": "mka",
    "Manifold alignment merging (non-iterative)": "mka-noniter",
    "Reverse pruning": "reverse",
    "Fixed lambda = 0.5": "fixed:0.5",
    "Fixed lambda = 0.7": "fixed:0.7",
}

methods_to_names = {v: k for k, v in names_to_methods.items()}

names_to_tasks = {
    "Order-2 Markov chain": "markov-chain",
    "Modular addition": "modular-addition",
}
