//! Reference NMS: a pixel survives when it wins its own window, the winner
//! being the largest value with the earliest (row, column) among equals.

pub fn nms_oracle(values: &[f64], w: usize, h: usize, window: usize) -> Vec<(usize, usize)> {
    let r = (window / 2) as i64;
    let mut kept = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let v = values[(y as usize) * w + x as usize];
            if v <= 0.0 {
                continue;
            }
            let mut winner = (f64::NEG_INFINITY, i64::MAX, i64::MAX);
            for yy in y - r..=y + r {
                for xx in x - r..=x + r {
                    if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
                        continue;
                    }
                    let u = values[(yy as usize) * w + xx as usize];
                    if u > winner.0 || (u == winner.0 && (yy, xx) < (winner.1, winner.2)) {
                        winner = (u, yy, xx);
                    }
                }
            }
            if (winner.1, winner.2) == (y, x) {
                kept.push((x as usize, y as usize));
            }
        }
    }
    kept
}
