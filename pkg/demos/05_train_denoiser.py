"""Train the windowed-mixer denoiser on a small reverse task and decode.

Runs in well under a minute at this scale. Run: python demos/05_train_denoiser.py
"""
import numpy as np

from prrlab import (DecodeConfig, NeuralDenoiserConfig, SequenceState, Threshold,
                    Top1, TaskSpec, Vocabulary, decode, exact_match_accuracy,
                    make_task, train_denoiser)

L, V = 12, 16
vocab = Vocabulary(V, mask_id=0)
train = make_task(TaskSpec(kind="reverse", prompt_len=L, answer_len=L,
                           vocab_size=V, n=768, seed=1))
config = NeuralDenoiserConfig(vocab_size=V, embed_dim=12, mix_channels=8,
                              hidden_width=96, hidden_dim=16, epochs=16,
                              learning_rate=3e-3, batch_size=64)
model = train_denoiser(train.pairs, config, seed=2, vocab=vocab)
rep = model.train_report
print(f"trained on {rep['examples']} pairs for {rep['epochs']} epochs; "
      f"held-out masked-token accuracy {rep['masked_accuracy']:.3f}")
print("loss per epoch:", [round(x, 3) for x in rep["loss_per_epoch"]])

held = make_task(TaskSpec(kind="reverse", prompt_len=L, answer_len=L,
                          vocab_size=V, n=32, seed=77))
for rule in (Top1(), Threshold(0.9)):
    outs, nfes = [], []
    for prompt_tokens, answer in held.pairs:
        prompt = SequenceState.from_prompt(prompt_tokens, L, vocab)
        res = decode(model, prompt, DecodeConfig(length=L, step_budget=L,
                                                 block_size=4, rule=rule))
        outs.append(res.output[L:])
        nfes.append(res.nfe)
    em = exact_match_accuracy(outs, held.answers())
    print(f"{rule.describe():<16} exact match {em:.3f} at mean NFE {np.mean(nfes):.2f}")
