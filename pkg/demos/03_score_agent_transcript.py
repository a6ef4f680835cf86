"""Score a free-text agent turn against the products on screen.

    python demos/03_score_agent_transcript.py
"""

from praclab import evaluation as ev
from praclab import scene as sc

products = [
    ("Puma Men Flyer Runner Blue Sports Shoes", "Puma"),
    ("Adidas Men Lite Racer Grey Sports Shoes", "Adidas"),
    ("Reebok Men Energy Runner Black Sports Shoes", "Reebok"),
    ("Skechers Men Go Walk Navy Sports Shoes", "Skechers"),
    ("Nike Men Downshifter White Sports Shoes", "Nike"),
]
turn = """<think>Five pairs are listed. The Adidas pair is grey and the Puma pair is blue.
I prefer a white shoe, so I will pick the Nike Men Downshifter White Sports Shoes.</think>
pyautogui.click(x=860, y=300)"""

parsed = ev.parse_text(turn, [name for name, _ in products], tau=0.6)
print("selection:", " ".join(parsed.selection.words))
print("click:", parsed.click.coords)

# name route: word overlap times brand match, per product
scores = [ev.name_match(parsed.selection.words, name, brand) for name, brand in products]
for (name, _), s in zip(products, scores):
    print(f"  o={s.o:.2f} b={s.b} s={s.s:.2f}  {name}")
print("name success for the Nike target:", ev.success_score(scores, 4))

# click route: which of five 192-px columns on a 960x540 screen was hit
boxes = [sc.BoundingBox(192 * n, 0, 192 * (n + 1) - 1, 539) for n in range(5)]
hits = [ev.coord_match(parsed.click.coords, b) for b in boxes]
print("click lands in column", hits.index(1) + 1, "->", ev.success_score(hits, 4))
