"""A small hand-built dataset for offline runs, tests and demos.

Three conversations of four assessed turns, five PTKB statements each. Nine
turns depend on a PTKB statement; for each of those one relevant passage
mentions only PTKB vocabulary, so it can be retrieved only when the statement
reaches the query. One statement per conversation matches no passage at all.
"""

from __future__ import annotations

import json
import random
from pathlib import Path

import numpy as np

from .data import Conversation, Document, PtkbEntry, Turn, write_corpus, write_qrels, write_topics
from .dense import HashEmbedder, write_vectors

EMBEDDING_DIM = 8
N_DOCS = 200

# Counted by hand from the tables below; tests compare loaders against these.
MANIFEST = {
    "conversations": 3,
    "turns": 12,
    "assessed_turns": 12,
    "turns_with_ptkb": 9,
    "ptkb_entries": 15,
    "qrel_records": 40,
    "qrel_turns": 12,
    "documents": 200,
    "embedding_rows": 200,
    "embedding_dim": 8,
    "icl_examples": 5,
    "queries": 20,
}

PTKB = {
    "1-1": ["My mother collects antique crystal glassware.", "I am allergic to peanuts.",
            "I live in Amsterdam.", "I prefer traveling by train.", "I am vegetarian."],
    "2-1": ["I have a knee injury.", "I am training for a marathon.", "I work night shifts.",
            "I own a dog named Max.", "I live in Berlin."],
    "3-1": ["I am lactose intolerant.", "I have two young children.", "I cook on a tight budget.",
            "I own an air fryer.", "I grew up in Italy."],
}
TOPICS = {"1-1": "Travel to Istanbul", "2-1": "Running", "3-1": "Cooking at home"}

# turn id -> (utterance, canonical response, human PTKB numbers, judged [(grade, text)], unjudged texts)
TURNS = {
    "1-1-1": (
        "I am planning a trip to Istanbul. What Turkish souvenirs are popular?",
        "Popular Turkish souvenirs include carpets, ceramics, lokum and evil eye charms.",
        [],
        [(3, "Turkish souvenirs such as hand woven carpets, painted ceramics and evil eye charms are popular with visitors to Istanbul."),
         (2, "The Grand Bazaar in Istanbul sells Turkish delight, copper coffee pots and other souvenirs."),
         (0, "Istanbul trip planning: the best season to visit is spring, when hotels are cheaper.")],
        ["Popular beaches on the Turkish coast attract visitors every summer.",
         "A trip to Cappadocia is popular for hot air balloon rides over Turkish valleys.",
         "Planning a budget trip requires comparing flight prices early."],
    ),
    "1-1-2": (
        "Which one do you suggest for my mom?",
        "Hand cut crystal pieces from the Grand Bazaar make a good pick.",
        [1],
        [(4, "Istanbul shops sell hand cut crystal glassware, a souvenir loved by antique collectors."),
         (3, "Antique crystal glassware from Beykoz workshops is prized by collectors of fine glass."),
         (0, "Which Turkish souvenir to suggest? Magnets and keychains are the cheapest option."),
         (1, "Turkish souvenirs for a mom: scarves and scented soaps are thoughtful gifts.")],
        ["One popular Istanbul souvenir is a tea set with tulip shaped glasses.",
         "Tourists often suggest buying spices at the Egyptian Bazaar in Istanbul.",
         "Turkish souvenirs for children include wooden toys and puppets."],
    ),
    "1-1-3": (
        "What local dishes should I try there?",
        "Try meze, kebabs and baklava.",
        [5],
        [(4, "Vegetarian dishes in Istanbul include stuffed vine leaves, lentil soup and local meze."),
         (3, "A vegetarian diet excludes meat and fish; meat free protein comes from beans and lentils."),
         (0, "Local Istanbul dishes like doner kebab and grilled fish are worth trying.")],
        ["Local street food dishes in Istanbul include simit and balik ekmek.",
         "Istanbul restaurants serve lamb dishes with yogurt sauce.",
         "Try the local coffee served in small cups."],
    ),
    "1-1-4": (
        "How do I get from the airport to the city center?",
        "Taxis, buses and rail lines all serve the airport.",
        [4],
        [(4, "A train line connects Istanbul airport to the city center in about forty minutes."),
         (3, "Traveling by train across Turkey is comfortable on the high speed rail network."),
         (0, "Airport taxis to the city center are fast but expensive at night.")],
        ["The new Istanbul airport is one of the largest in the world.",
         "City center hotels are close to the historic peninsula.",
         "Airport lounges offer food and showers for long layovers.",
         "Airport shuttle buses leave every thirty minutes for the center."],
    ),
    "2-1-1": (
        "How should I structure my weekly running plan?",
        "Mix easy runs, one workout and one long run each week.",
        [2],
        [(4, "A marathon training plan structures weekly running around one long run and easy recovery days."),
         (3, "Marathon training builds endurance over sixteen to twenty weeks before race day."),
         (0, "A weekly running plan for beginners alternates walking and jogging.")],
        ["Running shoes should be replaced every five hundred miles.",
         "Structure your weekly plan with rest days to avoid burnout.",
         "Running in the morning improves consistency for many people."],
    ),
    "2-1-2": (
        "What exercises can strengthen my legs?",
        "Squats, lunges and step ups build leg strength.",
        [1],
        [(4, "Low impact exercises that strengthen the legs without stressing a knee injury include cycling and swimming."),
         (3, "Recovering from a knee injury requires rest, physiotherapy and gradual return to activity."),
         (0, "Heavy squats and lunges strengthen legs for sprinting."),
         (1, "Leg exercises for runners include calf raises and step ups.")],
        ["Exercises for a weekly running plan should include stretching.",
         "Strengthen your core with planks and bridges.",
         "Legs feel heavy after long runs without proper hydration."],
    ),
    "2-1-3": (
        "What should I eat before a long run?",
        "Carbohydrates two to three hours before the run work well.",
        [],
        [(3, "Eat a carbohydrate rich breakfast such as oatmeal or a bagel two hours before a long run."),
         (2, "Before a long run, eat easily digested foods and avoid high fiber meals."),
         (0, "Long run pacing should feel conversational for most of the distance.")],
        ["Eat protein after a run to help muscles recover.",
         "A long run on weekends builds aerobic base.",
         "Bananas are a popular snack for runners."],
    ),
    "2-1-4": (
        "Are there good running clubs near me?",
        "Many cities have free weekly group runs.",
        [5],
        [(4, "Running clubs in Berlin meet weekly in Tiergarten park for group runs."),
         (3, "Berlin parks like Tempelhofer Feld offer wide open space for joggers."),
         (0, "Good running clubs welcome members of all paces.")],
        ["Good running shoes are essential for club races.",
         "Running clubs often organize long runs on Sundays.",
         "Choose a club that matches your pace.",
         "Joining a running club near your home helps motivation."],
    ),
    "3-1-1": (
        "Can you suggest an easy dinner recipe?",
        "A vegetable stir fry with rice is quick and easy.",
        [3],
        [(4, "Easy dinner recipe on a tight budget: lentil curry with rice costs under two euros per serving."),
         (3, "Cooking on a tight budget means buying staples like beans, rice and seasonal vegetables in bulk."),
         (0, "An easy dinner recipe for guests: roast beef with red wine sauce.")],
        ["Dinner recipe ideas for the weekend include homemade pizza.",
         "An easy recipe for pancakes uses three ingredients.",
         "Suggest a dinner party menu with three courses."],
    ),
    "3-1-2": (
        "What dessert could I make for a birthday party?",
        "A chocolate cake or cupcakes are classic choices.",
        [1],
        [(4, "A lactose free birthday dessert: chocolate cake made with oat milk and dairy free frosting."),
         (3, "Lactose intolerant people lack the enzyme needed to digest milk sugar."),
         (0, "Birthday party desserts like cheesecake and ice cream are crowd favorites."),
         (1, "Make a fruit salad dessert for a summer party.")],
        ["Birthday party games for adults.",
         "A dessert recipe for tiramisu needs mascarpone.",
         "Party planning checklist for a birthday at home."],
    ),
    "3-1-3": (
        "How can I get my kids to eat more vegetables?",
        "Involve them in cooking and keep offering vegetables.",
        [],
        [(3, "To get kids to eat more vegetables, involve them in cooking and offer vegetables repeatedly."),
         (2, "Hiding vegetables in sauces helps picky kids eat them."),
         (0, "Vegetables lose vitamins when boiled too long.")],
        ["Kids eat more when meals are served at regular times.",
         "Growing vegetables in a garden is a fun hobby.",
         "More fiber in the diet improves digestion."],
    ),
    "3-1-4": (
        "Which kitchen appliance would save me time?",
        "A slow cooker or a pressure cooker saves a lot of time.",
        [4],
        [(4, "An air fryer is a kitchen appliance that saves time by cooking food quickly with hot air."),
         (3, "Air fryer recipes: crispy potatoes in fifteen minutes with a little oil."),
         (0, "Kitchen renovation costs depend on the appliances chosen."),
         (1, "A slow cooker is a kitchen appliance that saves time on busy days.")],
        ["Save time in the kitchen by preparing meals ahead.",
         "Time management tips for busy parents.",
         "Kitchen knives should be sharpened regularly."],
    ),
}

FILLER_WORDS = """
asteroid comet nebula galaxy quasar pulsar orbit telescope spectrum photon basalt granite
quartz feldspar magma tectonic glacier moraine sediment fossil trilobite amber violin cello
sonata fugue chord melody rhythm tempo harmony opera libretto prime integer matrix vector
theorem lemma axiom topology manifold tensor polynomial algorithm compiler kernel protocol
router packet cipher checksum bandwidth latency parliament senate ballot treaty monarchy
dynasty empire ottoman byzantine pharaoh pyramid papyrus hieroglyph chess gambit bishop rook
pawn castling sonnet stanza metaphor novel chapter archive ledger invoice audit tariff
volcano geyser canyon plateau delta estuary lagoon coral reef plankton whale dolphin falcon
eagle owl heron sparrow oak maple birch cedar pine fern moss lichen fungus spore enzyme
protein genome allele mutation neuron synapse cortex reflex hormone insulin
""".split()

ICL_EXAMPLES = [
    {"turn_id": "train-9-1-2",
     "history": [{"utterance": "I want to start learning a new language.",
                  "response": "Spanish and French are popular choices."}],
     "utterance": "Which one would be easier for me?",
     "ptkb": ["I speak Italian fluently.", "I have a cat.", "I work as a nurse."],
     "selected": [1],
     "rewrite": "Is Spanish or French easier to learn for a fluent Italian speaker?"},
    {"turn_id": "train-9-2-3",
     "history": [{"utterance": "I need a new laptop.", "response": "What will you use it for?"},
                 {"utterance": "Mostly for work.", "response": "Ultrabooks are light and fast."}],
     "utterance": "How much should I spend?",
     "ptkb": ["I am a graphic designer.", "I travel every week.", "I have a small budget."],
     "selected": [1, 3],
     "rewrite": "How much should a graphic designer on a small budget spend on a work laptop?"},
    {"turn_id": "train-9-3-1",
     "history": [],
     "utterance": "What is a good indoor plant?",
     "ptkb": ["My apartment gets little sunlight.", "I have two cats.", "I like jazz."],
     "selected": [1, 2],
     "rewrite": "Which low light indoor plants are safe for cats?"},
    {"turn_id": "train-9-4-2",
     "history": [{"utterance": "Tell me about the Tour de France.",
                  "response": "It is a three week cycling race in July."}],
     "utterance": "Who won it last year?",
     "ptkb": ["I live in Spain.", "I am a teacher.", "I dislike football."],
     "selected": [],
     "rewrite": "Who won the Tour de France last year?"},
    {"turn_id": "train-9-5-4",
     "history": [{"utterance": "I want to improve my sleep.",
                  "response": "A regular schedule helps most people."}],
     "utterance": "Should I avoid coffee?",
     "ptkb": ["I work night shifts.", "I drink four coffees a day.", "I run in the evening."],
     "selected": [1, 2],
     "rewrite": "Should a night shift worker who drinks four coffees a day cut caffeine to sleep better?"},
]

QUERIES = [
    "Turkish souvenirs popular in Istanbul",
    "antique crystal glassware souvenir for mom",
    "vegetarian local dishes Istanbul",
    "train from the airport to the city center",
    "weekly marathon training plan",
    "exercises to strengthen legs with a knee injury",
    "what to eat before a long run",
    "running clubs in Berlin",
    "easy dinner recipe on a tight budget",
    "lactose free birthday dessert",
    "get kids to eat more vegetables",
    "air fryer kitchen appliance save time",
    "Grand Bazaar coffee pots",
    "running shoes",
    "party birthday party birthday",
    "kitchen kitchen time",
    "recovering knee physiotherapy rest",
    "galaxy telescope orbit",
    "cheap hotels spring",
    "nothing matches zzzz",
]


def build_conversations() -> list[Conversation]:
    convs = []
    for conv_id, statements in PTKB.items():
        ptkb = tuple(PtkbEntry(f"{conv_id}:{i}", s) for i, s in enumerate(statements, start=1))
        turns = tuple(
            Turn(tid, utt, resp, frozenset(f"{conv_id}:{n}" for n in human), True)
            for tid, (utt, resp, human, _, _) in TURNS.items() if tid.startswith(conv_id + "-")
        )
        convs.append(Conversation(conv_id, TOPICS[conv_id], ptkb, turns))
    return convs


def build_corpus_and_qrels(seed: int = 7) -> tuple[list[Document], dict[str, dict[str, int]]]:
    rng = random.Random(seed)
    # (turn id or None, grade or None, text)
    pending: list[tuple[str | None, int | None, str]] = []
    for tid, (_, _, _, judged, unjudged) in TURNS.items():
        pending += [(tid, g, text) for g, text in judged]
        pending += [(None, None, text) for text in unjudged]
    while len(pending) < N_DOCS:
        words = [rng.choice(FILLER_WORDS) for _ in range(rng.randint(8, 20))]
        pending.append((None, None, " ".join(words).capitalize() + "."))
    rng.shuffle(pending)
    docs = []
    qrels: dict[str, dict[str, int]] = {tid: {} for tid in TURNS}
    for i, (tid, grade, text) in enumerate(pending):
        doc_id = f"d{i:03d}"
        docs.append(Document(doc_id, text))
        if tid is not None:
            qrels[tid][doc_id] = grade
    qrels = {t: dict(sorted(j.items())) for t, j in qrels.items()}
    return docs, qrels


def write_toy_dataset(root: str | Path) -> Path:
    root = Path(root)
    (root / "embeddings").mkdir(parents=True, exist_ok=True)
    write_topics(build_conversations(), root / "topics.json")
    docs, qrels = build_corpus_and_qrels()
    write_corpus(docs, root / "corpus.jsonl")
    write_qrels(qrels, root / "qrels.txt")
    (root / "icl_examples.json").write_text(json.dumps(ICL_EXAMPLES, indent=2) + "\n", encoding="utf-8")
    (root / "queries.txt").write_text("".join(q + "\n" for q in QUERIES), encoding="utf-8")
    vecs = HashEmbedder(EMBEDDING_DIM).embed([d.text for d in docs])
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    write_vectors(vecs.astype(np.float32), root / "embeddings" / "vectors.bin")
    (root / "embeddings" / "ids.txt").write_text("".join(d.doc_id + "\n" for d in docs), encoding="utf-8")
    (root / "manifest.json").write_text(json.dumps(MANIFEST, indent=2) + "\n", encoding="utf-8")
    return root
