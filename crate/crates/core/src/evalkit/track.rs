use crate::synthdata::Color;
use crate::video::VideoClip;

const THRESHOLD: f32 = 0.5;

/// Color-rule response of one pixel; a pixel belongs to `color` when the
/// response reaches 0.5.
pub fn color_response(color: Color, [r, g, b]: [f32; 3]) -> f32 {
    match color {
        Color::Red => r - g.max(b),
        Color::Green => g - r.max(b),
        Color::Blue => b - r.max(g),
        Color::Yellow => r.min(g) - b,
    }
}

/// Pixel indices of the largest 4-connected component (the earliest in
/// scan order among equals).
fn largest_members(mask: &[bool], height: usize, width: usize) -> Option<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut best: Option<Vec<usize>> = None;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut members = Vec::new();
        while let Some(i) = stack.pop() {
            members.push(i);
            let (y, x) = (i / width, i % width);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < width {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - width);
            }
            if y + 1 < height {
                visit(i + width);
            }
        }
        if best.as_ref().is_none_or(|m| members.len() > m.len()) {
            best = Some(members);
        }
    }
    best
}

/// Centroid (pixel-centre convention) and area of the largest
/// 4-connected component.
pub fn largest_component(mask: &[bool], height: usize, width: usize) -> Option<([f64; 2], usize)> {
    let members = largest_members(mask, height, width)?;
    let n = members.len() as f64;
    let (sx, sy) = members
        .iter()
        .fold((0.0, 0.0), |(sx, sy), &i| (sx + (i % width) as f64 + 0.5, sy + (i / width) as f64 + 0.5));
    Some(([sx / n, sy / n], members.len()))
}

/// Sub-pixel centroid of the largest `color` component in frame `k`: the
/// component plus its one-pixel rim, each pixel weighted by its color
/// response (the coverage of an antialiased edge).
fn refined_centroid(video: &VideoClip, k: usize, color: Color) -> Option<[f64; 2]> {
    let (h, w) = (video.height, video.width);
    let response: Vec<f32> = (0..h * w).map(|i| color_response(color, video.rgb(k, i / w, i % w))).collect();
    let mask: Vec<bool> = response.iter().map(|&r| r >= THRESHOLD).collect();
    let members = largest_members(&mask, h, w)?;
    let mut taken = vec![false; h * w];
    for &i in &members {
        taken[i] = true;
    }
    let mut region = members.clone();
    for &i in &members {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for (dy, dx) in [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)] {
            let (ny, nx) = (y + dy, x + dx);
            if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                continue;
            }
            let j = ny as usize * w + nx as usize;
            if !taken[j] && !mask[j] && response[j] > 0.0 {
                taken[j] = true;
                region.push(j);
            }
        }
    }
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for i in region {
        let wt = response[i].clamp(0.0, 1.0) as f64;
        sx += wt * ((i % w) as f64 + 0.5);
        sy += wt * ((i / w) as f64 + 0.5);
        sw += wt;
    }
    Some([sx / sw, sy / sw])
}

/// Per-frame centroid of the largest `color` blob; `None` where the color
/// does not occur.
pub fn track_centroids(video: &VideoClip, color: Color) -> Vec<Option<[f64; 2]>> {
    (0..video.frames).map(|k| refined_centroid(video, k, color)).collect()
}

/// Fraction of pixels in frames `range` matching each color, in
/// `Color::ALL` order.
pub fn color_occupancy(video: &VideoClip, frames: std::ops::Range<usize>) -> [f64; 4] {
    let mut counts = [0usize; 4];
    let mut total = 0usize;
    for k in frames {
        for y in 0..video.height {
            for x in 0..video.width {
                let px = video.rgb(k, y, x);
                for (c, n) in Color::ALL.iter().zip(counts.iter_mut()) {
                    *n += (color_response(*c, px) >= THRESHOLD) as usize;
                }
                total += 1;
            }
        }
    }
    counts.map(|n| if total == 0 { 0.0 } else { n as f64 / total as f64 })
}

/// Color covering the most pixels across the clip, if any color occurs.
pub fn dominant_color(video: &VideoClip) -> Option<Color> {
    let occ = color_occupancy(video, 0..video.frames);
    let (i, v) = occ.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1))?;
    (*v > 0.0).then_some(Color::ALL[i])
}
