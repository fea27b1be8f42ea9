"""
Quantization misalignment lab.

Contrasts layer-wise MSE quantization (GPTQ) with global NLL fine-tuning
under quantization (QAFT) on a byte-level toy transformer, and probes the
loss landscape around the pretrained weights.
"""
