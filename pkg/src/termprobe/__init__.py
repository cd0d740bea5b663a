"""Term-presence retrieval: a cross-attention scorer that asks whether each bank term occurs in an utterance."""
from .baseline import DenseIndex, cosine_retrieve
from .config import EngineConfig
from .corpus import (Benchmark, Corpus, SpeechFeatures, Stage, TermBank, TermEntry, TermFeatures, ToyEncoder,
                     ToyEncoderConfig, build_benchmark, generate_corpus)
from .evalbench import AblationArm, RecallReport, evaluate, recall_at_k, run_ablations, sweep_bank_size
from .retriever import BatchScorer, RetrieverParams, gradcheck, load_checkpoint, save_checkpoint, score_bank, \
    score_term
from .serving import PreparedBank, PromptTemplate, build_prompt, retrieve, top_k_select
from .training import TrainingConfig, dual_bce_loss, lr_at, run_curriculum

__version__ = "0.1.0"
