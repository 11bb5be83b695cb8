//! Block-diagram rendering of a selected path.

use std::fmt::Write;

use hwnas::search_space::{ArchPath, MacroArch, SKIP_INDEX};

/// One line per superblock; a blank line precedes every downsampling block
/// so networks line up at their resolution changes.
pub fn render_text(name: &str, arch: &MacroArch, path: &ArchPath) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{name} ({} superblocks, space {})", path.len(), arch.name);
    let _ = writeln!(out, "  stem  k{} s{}  {}->{}", arch.stem.kernel, arch.stem.stride, arch.stem.c_in, arch.stem.c_out);
    for (i, sb) in arch.superblocks.iter().enumerate() {
        let down = sb.stride == 2;
        if down {
            let _ = writeln!(out);
        }
        let marker = if down { "v" } else { " " };
        let glyph = if path.choices[i] == SKIP_INDEX {
            "---- pass-through ----".to_string()
        } else {
            format!("[{}]", path.candidate(i).mnemonic())
        };
        let _ = writeln!(
            out,
            "{marker} {i:>3}  s{}  {:>3}->{:<3}  os{:<2}  {glyph}",
            sb.stride, sb.c_in, sb.c_out, sb.output_stride
        );
    }
    let d = arch.decoder;
    let _ = writeln!(out, "  decoder  {:?}  {} ch  {} classes", d.kind, d.internal_channels, d.num_classes);
    out
}

/// Horizontal row of glyphs: filled boxes for stride-2 blocks, outlined
/// boxes otherwise, a plain line for pass-through.
pub fn render_svg(name: &str, arch: &MacroArch, path: &ArchPath) -> String {
    const CELL: usize = 96;
    const BOX_W: usize = 84;
    const BOX_H: usize = 40;
    const TOP: usize = 40;
    let width = CELL * path.len().max(1) + 20;
    let height = TOP + BOX_H + 40;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="10">"#
    );
    let _ = writeln!(svg, r##"<rect width="{width}" height="{height}" fill="#ffffff"/>"##);
    let _ = writeln!(svg, r#"<text x="10" y="20" font-size="13">{}</text>"#, escape(name));
    for (i, sb) in arch.superblocks.iter().enumerate() {
        let x = 10 + i * CELL;
        let mid = TOP + BOX_H / 2;
        if path.choices[i] == SKIP_INDEX {
            let _ = writeln!(svg, r##"<line x1="{x}" y1="{mid}" x2="{}" y2="{mid}" stroke="#888" stroke-dasharray="4 3"/>"##, x + BOX_W);
            let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">skip</text>"#, x + BOX_W / 2, mid - 6);
        } else {
            let fill = if sb.stride == 2 { "#f4a261" } else { "#ffffff" };
            let _ = writeln!(svg, r##"<rect x="{x}" y="{TOP}" width="{BOX_W}" height="{BOX_H}" fill="{fill}" stroke="#000"/>"##);
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                x + BOX_W / 2,
                mid + 4,
                path.candidate(i).mnemonic()
            );
        }
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{i} s{}</text>"#, x + BOX_W / 2, TOP + BOX_H + 16, sb.stride);
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use hwnas::search_space::{builtin_path, builtin_space};

    #[test]
    fn mac_small_has_twenty_glyphs_and_three_downsampling_rows() {
        let arch = builtin_space("small").unwrap();
        let path = builtin_path("mac_small").unwrap();
        let text = render_text("mac_small", &arch, &path);
        let rows: Vec<&str> = text.lines().filter(|l| l.len() > 6 && l[2..5].trim().parse::<usize>().is_ok()).collect();
        assert_eq!(rows.len(), 20);
        let down: Vec<usize> = rows
            .iter()
            .filter(|l| l.starts_with('v'))
            .map(|l| l[2..5].trim().parse().unwrap())
            .collect();
        assert_eq!(down, vec![0, 4, 8]);
    }

    #[test]
    fn skip_is_a_pass_through() {
        let arch = builtin_space("small").unwrap();
        let path = ArchPath::all_skip(arch.num_superblocks());
        let mut path = path;
        for (i, sb) in arch.superblocks.iter().enumerate() {
            if !sb.is_admissible(SKIP_INDEX) {
                path.choices[i] = 0;
            }
        }
        let text = render_text("skips", &arch, &path);
        assert!(text.contains("pass-through"));
        let svg = render_svg("skips", &arch, &path);
        assert!(svg.contains("stroke-dasharray"));
        assert_eq!(svg, render_svg("skips", &arch, &path));
    }
}
