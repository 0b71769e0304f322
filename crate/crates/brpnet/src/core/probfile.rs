//! Raw probability-map files: magic "BRPF", u32 height, u32 width, then
//! h*w little-endian f32 values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::grid::Grid;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"BRPF";

pub fn save_prob_map(path: &Path, map: &Grid<f32>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(map.h() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(map.w() as u32).to_le_bytes()).map_err(io)?;
    for &v in map.data() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_prob_map(path: &Path) -> Result<Grid<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::InvalidArgument(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let mut u = [0u8; 4];
    r.read_exact(&mut u).map_err(io)?;
    let h = u32::from_le_bytes(u) as usize;
    r.read_exact(&mut u).map_err(io)?;
    let w = u32::from_le_bytes(u) as usize;
    let mut data = vec![0f32; h * w];
    let mut buf = vec![0u8; h * w * 4];
    r.read_exact(&mut buf).map_err(io)?;
    for (i, chunk) in buf.chunks_exact(4).enumerate() {
        data[i] = f32::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(Grid::from_vec(h, w, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = std::env::temp_dir().join("brpf_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("map.brpf");
        let g = Grid::from_vec(2, 3, vec![0.0f32, 0.25, 0.5, 0.75, 1.0, 0.125]);
        save_prob_map(&path, &g).unwrap();
        let back = load_prob_map(&path).unwrap();
        assert_eq!(g, back);
    }
}
