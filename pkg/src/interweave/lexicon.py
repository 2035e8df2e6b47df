"""Bundled word lists backing the rule-based instruction grammar.

The rule parser matches ``determiner? adjective* noun+ postmodifier?`` where a
postmodifier is a locative preposition followed by a bare ``adjective* noun+``
(no determiner). Placement prepositions such as "in"/"into"/"onto" never head
a postmodifier: they separate the manipulated object from its destination, so
"put eggplant in basket" yields two phrases while "silver pot on towel" stays
one.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Lexicon:
    determiners: frozenset[str]
    adjectives: frozenset[str]
    nouns: frozenset[str]
    postmodifier_prepositions: frozenset[str]

    def with_nouns(self, *extra: str) -> "Lexicon":
        return Lexicon(
            determiners=self.determiners,
            adjectives=self.adjectives,
            nouns=self.nouns | frozenset(w.lower() for w in extra),
            postmodifier_prepositions=self.postmodifier_prepositions,
        )


DETERMINERS = frozenset({"the", "a", "an", "this", "that"})

COLORS = (
    "red", "green", "blue", "yellow", "purple", "orange", "cyan", "magenta",
    "pink", "brown", "gray", "grey", "white", "black", "silver", "golden",
)

ADJECTIVES = frozenset(COLORS) | frozenset({
    "big", "small", "large", "tiny", "little", "long", "short", "shiny",
    "striped", "wooden", "metal", "plastic", "soft", "toy",
})

SHAPE_NOUNS = (
    "circle", "square", "triangle", "star", "pentagon", "hexagon",
    "diamond", "cross", "ring", "block", "cube",
)

NOUNS = frozenset(SHAPE_NOUNS) | frozenset({
    # kitchenware and containers
    "spoon", "fork", "knife", "pot", "pan", "cup", "mug", "bowl", "plate",
    "dish", "saucer", "basket", "bottle", "can", "jar", "ladle", "spatula",
    "cutter", "server", "pasta",
    # food
    "eggplant", "carrot", "zucchini", "pepper", "corn", "lemon", "bean",
    "apple", "banana", "tomato",
    # scene furniture and appliances
    "towel", "cloth", "microwave", "oven", "sink", "table", "drawer", "tray",
    # misc manipulanda
    "ball", "dinosaur", "elephant", "stapler", "tape", "measure", "paper",
    "pile", "pen", "pencil", "brush", "sponge", "box", "lid", "cap", "wheel",
})

POSTMODIFIER_PREPOSITIONS = frozenset({
    "near", "beside", "under", "over", "by", "behind", "above", "below",
    "atop", "on",
})

DEFAULT_LEXICON = Lexicon(
    determiners=DETERMINERS,
    adjectives=ADJECTIVES,
    nouns=NOUNS,
    postmodifier_prepositions=POSTMODIFIER_PREPOSITIONS,
)


def naive_singular(word: str) -> str:
    """Best-effort singular used for pool-category normalization."""
    w = word.strip().lower()
    if len(w) > 3 and w.endswith("s") and not w.endswith("ss"):
        return w[:-1]
    return w
