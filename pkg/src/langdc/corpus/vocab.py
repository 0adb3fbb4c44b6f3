"""Fixed token tables shared by captions, questions and answers.

Ids ``0 .. CAPTION_VOCAB_SIZE-1`` form the caption vocabulary (specials, content and
filler words) used by the captioner; the base language model's vocabulary extends
it with question/answer words.
"""

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
SPECIALS = [PAD, BOS, EOS]

COLORS = ["red", "green", "blue", "yellow", "purple", "orange"]
SHAPES = ["circle", "square", "triangle", "star"]
ZONES = [
    "top-left", "top", "top-right",
    "mid-left", "middle", "mid-right",
    "bottom-left", "bottom", "bottom-right",
]
VERBS = {"move": "moves", "appear": "appears", "disappear": "disappears"}
DIRECTIONS = ["left", "right", "up", "down"]
ARGS = ["in", "out"]
ORDINALS = ["first", "second", "third"]
EMPTY = ["empty", "scene"]

# words dropped by the supervision filter: articles, connectives, speculation
FILLER = {
    "article": ["a", "an", "the"],
    "connective": ["and", "also", "then", "while", "with"],
    "speculative": ["maybe", "perhaps", "probably", "seems", "likely"],
    "other": ["there", "is", "at", "of", "near"],
}
FILLER_WORDS = frozenset(w for ws in FILLER.values() for w in ws)

CONTENT_WORDS = COLORS + SHAPES + ZONES + list(VERBS.values()) + DIRECTIONS + ARGS + ORDINALS + EMPTY
CAPTION_WORDS = SPECIALS + CONTENT_WORDS + [w for ws in FILLER.values() for w in ws]

NUMBERS = ["zero", "one", "two", "three", "four", "five", "six"]
LETTERS = ["A", "B", "C", "D"]
QA_WORDS = (
    ["how", "many", "which", "way", "does", "move", "what", "color", "?", "yes", "no",
     "unknown", "options", "answer"]
    + NUMBERS + LETTERS
)

LLM_WORDS = CAPTION_WORDS + [w for w in QA_WORDS if w not in CAPTION_WORDS]

assert len(set(CAPTION_WORDS)) == len(CAPTION_WORDS)
assert len(set(LLM_WORDS)) == len(LLM_WORDS)

TOKEN_ID = {w: i for i, w in enumerate(LLM_WORDS)}
CAPTION_VOCAB_SIZE = len(CAPTION_WORDS)
LLM_VOCAB_SIZE = len(LLM_WORDS)
PAD_ID, BOS_ID, EOS_ID = TOKEN_ID[PAD], TOKEN_ID[BOS], TOKEN_ID[EOS]
FILLER_IDS = frozenset(TOKEN_ID[w] for w in FILLER_WORDS)
LETTER_IDS = [TOKEN_ID[w] for w in LETTERS]


def encode(words):
    return [TOKEN_ID[w] for w in words]


def decode(ids):
    return [LLM_WORDS[i] for i in ids]


def is_filler(token):
    word = token if isinstance(token, str) else LLM_WORDS[token]
    return word in FILLER_WORDS
