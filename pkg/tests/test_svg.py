import xml.etree.ElementTree as ET

from bevsan.svg import bar_chart, histogram_chart

NS = "{http://www.w3.org/2000/svg}"


def bars(svg):
    root = ET.fromstring(svg)
    return [r for r in root.iter(NS + "rect") if r.find(NS + "title") is not None]


def test_bar_heights_are_proportional():
    svg = bar_chart(["a", "b"], {"s": [1.0, 0.5]})
    h = [float(r.get("height")) for r in bars(svg)]
    assert h[0] == 2 * h[1] > 0


def test_grouped_series_and_legend():
    svg = bar_chart(["x", "y", "z"], {"p": [1, 2, 3], "q": [3, 2, 1]}, title="t & u")
    assert len(bars(svg)) == 6
    assert "t &amp; u" in svg
    assert ">p</text>" in svg and ">q</text>" in svg


def test_error_bars_drawn():
    svg = bar_chart(["a"], {"s": [0.5]}, errors={"s": [0.1]})
    lines = ET.fromstring(svg).findall(NS + "line")
    assert len(lines) == 3  # two axes plus one error bar


def test_empty_input_is_valid_svg():
    for svg in (bar_chart([], {}), bar_chart(["a"], {"s": [0.0]}), histogram_chart([0.0], [])):
        ET.fromstring(svg)


def test_output_is_deterministic():
    args = (["a", "b"], {"s": [0.123456, 7.0]})
    assert bar_chart(*args) == bar_chart(*args)


def test_histogram_labels_every_tenth_bin():
    edges = [i * 0.1 for i in range(21)]
    svg = histogram_chart(edges, [1] * 20)
    assert len(bars(svg)) == 20
    labels = [t.text for t in ET.fromstring(svg).iter(NS + "text") if t.get("y") == "320"]
    assert [l for l in labels if l] == ["0", "1"]
