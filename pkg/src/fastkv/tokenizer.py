"""Byte-level tokenizer: ids 0-255 are raw bytes, 256-259 are specials."""

PAD = 256
BOS = 257
EOS = 258
REPEAT_SEP = 259

VOCAB_SIZE = 260

# Default instruction scaffolding inserted between the two context copies
# of a reconstruction layout, delimited on both sides by REPEAT_SEP.
DEFAULT_REPEAT_PROMPT_TEXT = "\n\nRepeat the previous context:\n\n"


def encode(text):
    """UTF-8 bytes of text as a list of token ids."""
    return list(text.encode("utf-8"))


def decode(tokens):
    """Inverse of encode; specials render as printable placeholders."""
    specials = {PAD: "<pad>", BOS: "<bos>", EOS: "<eos>", REPEAT_SEP: "<sep>"}
    out = []
    run = bytearray()
    for t in tokens:
        if t in specials:
            out.append(run.decode("utf-8", errors="replace"))
            run = bytearray()
            out.append(specials[t])
        else:
            run.append(t)
    out.append(run.decode("utf-8", errors="replace"))
    return "".join(out)


def default_repeat_prompt():
    """Repeat prompt tokens used by the reconstruction layout."""
    return [REPEAT_SEP] + encode(DEFAULT_REPEAT_PROMPT_TEXT) + [REPEAT_SEP]


def token_repr(token):
    """Short printable form of one token, for frequency tables."""
    if token == PAD:
        return "<pad>"
    if token == BOS:
        return "<bos>"
    if token == EOS:
        return "<eos>"
    if token == REPEAT_SEP:
        return "<sep>"
    ch = bytes([token]).decode("utf-8", errors="replace")
    if ch == "\n":
        return "\\n"
    if ch == "\t":
        return "\\t"
    if ch == " ":
        return "\\s"
    if ch == "\r":
        return "\\r"
    return ch
