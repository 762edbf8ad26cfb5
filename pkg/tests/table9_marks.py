"""Independent transcription of the check marks in the architecture comparison table."""

# Check marks read off the architecture comparison table, one tuple per row in
# column order LayerScale, RMSNorm, SwiGLU, RoPE, Registers, QK-Norm, QKV-Bias.
# GPT-oss uses post-norm in place of LayerScale; it is the only starred row.
TRANSCRIBED = [
    ("Vanilla", (0, 0, 0, 0, 0, 0, 1)),
    ("DeiT-III", (1, 0, 0, 0, 0, 0, 1)),
    ("DINOv2", (1, 0, 0, 0, 1, 0, 1)),
    ("VisionLlama", (0, 0, 1, 1, 0, 0, 1)),
    ("DINOv3", (1, 0, 0, 0, 1, 0, 0)),
    ("NEPA", (1, 0, 1, 1, 0, 1, 1)),
    ("LLaMA", (0, 1, 1, 1, 0, 0, 0)),
    ("Qwen", (0, 1, 1, 1, 0, 0, 1)),
    ("GPT-oss", (1, 1, 1, 1, 0, 0, 0)),
    ("Gemma3", (0, 1, 1, 1, 0, 1, 0)),
    ("ViT-5", (1, 1, 0, 1, 1, 1, 0)),
]
STARRED = {"GPT-oss"}


def expected_marks(name, bits):
    s = "".join("Y" if b else "N" for b in bits)
    return ("P" + s[1:]) if name in STARRED else s
