from .compare import CompareInitsProtocol, compare_inits, summarize_pairs
from .no_finetune import NoFinetuneProtocol, eval_no_finetune
from .transfer import TransferProtocol, transfer_eval
