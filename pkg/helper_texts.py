homepage_helpers = {
    "welcome_message": """Welcome to the Layer Merging Explorer! Train a small transformer on a synthetic task,
    look at how similar its layers are, and see how much of it survives when neighbouring layers are merged.""",
    "similarity_help": """<div class="page-summary">
    Embed every layer's activations with diffusion maps and compare layers with mutual information or a distance-based measure.
    </div>""",
    "compression_help": """<div class="page-summary">
    Merge or prune layers at several compression ratios and compare the accuracy curves of the different methods.
    </div>""",
    "model_settings": "Models are trained in-process on a seeded synthetic task. The same seed always gives the same model, so results can be reproduced from the command line with identical flags.",
    "intro_text": """### Introduction
Deep transformers are often redundant: consecutive layers can compute nearly the same transformation. Removing whole layers is the simplest way to make a model smaller, but deleting a layer throws its parameters away. Merging instead folds two neighbouring layers into one, keeping a weighted average of both.

Which layers should be merged, and with what weights? This app answers the first question by comparing the *geometry* of each layer's activations, and the second by using the similarity score itself (or an information bottleneck objective) as the merge weight.
    """,
    "similarity_text": """### Layer Similarity
For a fixed set of inputs, each layer produces a cloud of activation vectors. We build a Gaussian affinity graph over that cloud, take the leading eigenvectors of the random-walk operator (a *diffusion map*), and compare two layers through the mutual information of their embeddings, assuming they are jointly Gaussian. High scores between neighbouring layers mean the second layer barely changes the representation, which makes the pair a good merge candidate.""",
    "compression_text": """### Compression
The merge loop repeatedly picks the most similar pair of adjacent layers and replaces both with their weighted average. You can compare it against reverse pruning (dropping the deepest layers) and against merging with a fixed weight that ignores similarity. The compression ratio counts removed layers, and optionally quantisation as well.""",
    "technical_text": """#### Technical info
The model is a pre-norm decoder-only transformer with rotary position encoding, implemented in PyTorch and stored in a small binary checkpoint format. Every step of the pipeline is also available through the `cli.py` command-line tool, which writes the same artifacts (checkpoints, similarity CSV and PGM heatmaps, merge logs and JSON reports).""",
}

measure_info = {
    "nmi": """**Normalised mutual information** divides the Gaussian mutual information of two layer embeddings by the geometric mean of their entropies. When an embedding has non-positive differential entropy the score falls back to I/(I+1), which stays between 0 and 1 and grows with I.""",
    "cosine": """**Cosine similarity** averages the cosine between the embedding of the same input at two layers, rescaled from [-1, 1] to [0, 1].""",
    "euclidean-rbf": """**Euclidean distance** averages the squared distance between paired embedding rows and maps it to a similarity with an RBF kernel calibrated on the median distance over all layer pairs.""",
    "mahalanobis-rbf": """**Mahalanobis distance** works like the Euclidean measure but whitens the differences with the pooled covariance of all layer embeddings.""",
}

similarity_page_helpers = {
    "help_1": """<h3 style="margin: 0;">How to use this tool:</h3>
    <ol>
        <li>Choose the model size and the synthetic task, then click 'Train model'. Training a few hundred steps takes seconds.</li>
        <li>Optionally plant a redundant layer: a new block whose weights are scaled by a small epsilon, so it barely changes its input.</li>
        <li>Pick a similarity measure and the diffusion map settings and click 'Compute similarity'.</li>
        <li>The heatmap shows the similarity of every pair of layers; the highlighted cell is the adjacent pair the merge loop would pick first.</li>
    </ol>
    <p style="margin: 0;">If you planted a layer, does the highlighted pair contain it?</p>""",
}

compression_page_helpers = {
    "help_1": """<h3 style="margin: 0;">How to use this tool:</h3>
    <ol>
        <li>Train (or reuse) a model on the Layer Similarity page.</li>
        <li>Select the methods to compare and the compression ratios to try.</li>
        <li>Click 'Run sweep'. Each method compresses the model to every ratio and the result is evaluated on held-out sequences.</li>
    </ol>
    <p style="margin: 0;">The sweep can take a minute for larger models, since merging recomputes the similarity after every step.</p>""",
}

helper_content = """<div style="background-color: rgba(144,238,144,0.15); padding: 1rem; border-radius: 0.5rem; margin-bottom: 2rem;">{text}</div>"""
