# Token weights from character-level error spans, and the losses they drive.
import numpy as np

from twa.annotations import AnnotatedExample, ErrorSpan, Severity, mqm_score
from twa.losses import cross_entropy_loss, nl_span_loss, twa_sequence_loss
from twa.tokenize_align import assign_token_weights, build_vocab, encode, token_strings

# a vocabulary of characters plus frequent n-grams
vocab = build_vocab(["the cat sat on the mat", "the hat"], 40)
print(len(vocab), "tokens:", vocab.tokens[4:])

# "cat" is wrong (major), "mat" is wrong too (minor)
ex = AnnotatedExample("doc1", "sysA", "le chat", "the cat sat on the mat",
                      (ErrorSpan(4, 7, "accuracy", Severity.MAJOR),
                       ErrorSpan(19, 22, "accuracy", Severity.MINOR)))
print("MQM score:", mqm_score(ex))

tok = encode(ex.output_text, vocab)
w = assign_token_weights(tok, ex.spans)
for piece, weight in zip(token_strings(tok, vocab)[1:], w.weights):
    print(f"{piece!r:>8} {weight:+.1f}")
# weight 1 before the first error, -5/-1 on error tokens, 0 on everything
# after the first error that is not itself an error

# keeping those tokens instead
w_keep = assign_token_weights(tok, ex.spans, ignore_off_trajectory=False)
print("keep off-trajectory:", w_keep.weights)

# pretend per-token log-probs from some model
logp = np.log(np.linspace(0.9, 0.3, len(w)))
ul = twa_sequence_loss(w, logp)
nl = twa_sequence_loss(w, logp, error_loss="nl")
print(f"UL variant loss {ul.value:.4f}, NL variant loss {nl.value:.4f}")
print("CE on the same tokens:", cross_entropy_loss(logp).value)

# why UL rather than NL: the NL gradient never fades, the UL one does
for s in (-1.0, -5.0, -20.0):
    ul_g = twa_sequence_loss(w, np.full(len(w), s / 3)).grad_logp[w.error_mask][0]
    nl_g = nl_span_loss([s], -1.0).grad_logp[0]
    print(f"span log p {s:6.1f}: UL grad {ul_g:.2e}   NL grad {nl_g:.2e}")
