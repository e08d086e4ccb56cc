import re
import tempfile
from pathlib import Path

from django.test import SimpleTestCase

from replay.exceptions import ReportError
from replay.plotting import emit_plot


class EmitPlotTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def write_csv(self, text, name='data.csv'):
        path = self.dir / name
        path.write_text(text, encoding='utf-8')
        return path

    def test_two_points_one_line(self):
        csv = self.write_csv('memory_mb,acc_cnn\n0.15,0.40\n6.0,0.75\n')
        svg = emit_plot(csv, 'memory_mb', ['acc_cnn'], self.dir / 'out.svg').read_text(encoding='utf-8')
        polylines = re.findall(r'<polyline[^>]*points="([^"]*)"', svg)
        self.assertEqual(len(polylines), 1)
        self.assertEqual(len(polylines[0].split()), 2)
        self.assertIn('>memory_mb</text>', svg)
        self.assertIn('>acc_cnn</text>', svg)

    def test_one_line_per_column(self):
        csv = self.write_csv('x,a,b\n1,2,3\n2,3,4\n3,1,1\n')
        svg = emit_plot(csv, 'x', ['a', 'b'], self.dir / 'out.svg').read_text(encoding='utf-8')
        self.assertEqual(svg.count('<polyline'), 2)

    def test_constant_series_still_renders(self):
        csv = self.write_csv('x,y\n1,0.5\n1,0.5\n')
        svg = emit_plot(csv, 'x', ['y'], self.dir / 'out.svg').read_text(encoding='utf-8')
        self.assertNotIn('nan', svg)

    def test_identical_bytes_on_rerun(self):
        csv = self.write_csv('x,y\n0,1\n1,0.5\n2,0.25\n')
        first = emit_plot(csv, 'x', ['y'], self.dir / 'a.svg', title='decay').read_bytes()
        second = emit_plot(csv, 'x', ['y'], self.dir / 'b.svg', title='decay').read_bytes()
        self.assertEqual(first, second)

    def test_missing_column(self):
        csv = self.write_csv('x,y\n0,1\n')
        with self.assertRaisesMessage(ReportError, "'z'"):
            emit_plot(csv, 'x', ['z'], self.dir / 'out.svg')

    def test_non_numeric_cell_names_row_and_column(self):
        csv = self.write_csv('x,y\n0,1\n1,abc\n')
        with self.assertRaisesMessage(ReportError, "Non-numeric value 'abc' at row 2, column 'y'"):
            emit_plot(csv, 'x', ['y'], self.dir / 'out.svg')
        self.assertFalse((self.dir / 'out.svg').exists())

    def test_empty_cell(self):
        csv = self.write_csv('x,y\n0,\n')
        with self.assertRaises(ReportError):
            emit_plot(csv, 'x', ['y'], self.dir / 'out.svg')

    def test_missing_file_and_no_rows(self):
        with self.assertRaises(ReportError):
            emit_plot(self.dir / 'absent.csv', 'x', ['y'], self.dir / 'out.svg')
        csv = self.write_csv('x,y\n')
        with self.assertRaises(ReportError):
            emit_plot(csv, 'x', ['y'], self.dir / 'out.svg')
