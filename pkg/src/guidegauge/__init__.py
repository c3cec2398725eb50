"""guidegauge: scores medical notes for healthcare-guideline adherence.

The workflow is a four-stage agent pipeline over a retrieval index built
from a guideline corpus: extract diagnoses and treatments from a note,
generate retrieval queries, retrieve guideline chunks by cosine
similarity, then judge each diagnosis and tally an adherence score.
Everything runs offline and deterministically with the hashed embedding
backend and a scripted chat transcript.
"""

__version__ = "0.1.0"
