from layoutgen.render import render_svg, render_to_dir
from layoutgen.vocab import Element, Layout, Vocabulary


def test_render_svg_structure():
    vocab = Vocabulary(5, 32)
    layout = Layout([Element(c, 10 + c, 10, 6, 4) for c in range(5)])
    svg = render_svg(layout, vocab)
    assert svg.startswith("<svg ") and svg.endswith("</svg>\n")
    assert svg.count("<rect") == 6  # canvas + 5 elements
    assert 'fill-opacity="0.4"' in svg
    # fixed palette: category colors are stable
    assert "#4e79a7" in svg and "#59a14f" in svg


def test_render_deterministic_bytes():
    vocab = Vocabulary(5, 32)
    layout = Layout([Element(1, 9, 9, 5, 5)])
    assert render_svg(layout, vocab) == render_svg(layout, vocab)


def test_render_to_dir(tmp_path):
    vocab = Vocabulary(5, 32)
    layouts = [Layout([Element(0, 8, 8, 4, 4)]), Layout([])]
    paths = render_to_dir(layouts, vocab, tmp_path / "svg")
    assert [p.name for p in paths] == ["layout_00000.svg", "layout_00001.svg"]
    assert all(p.exists() for p in paths)
    empty = paths[1].read_text()
    assert empty.count("<rect") == 1  # canvas only
