//! The `RSQB` dataset container.
//!
//! Little-endian layout:
//!
//! ```text
//! header:   magic "RSQB" | version u32 | sequences u32 | T u32 | H u32 | W u32 | max_balls u32
//! sequence: balls u8
//!           frames       T×H×W u8          round(255·pixel)
//!           collisions   T×max_balls u8    0/1, rows past `balls` are zero
//!           trajectories T×max_balls×4 f32 (x, y, vx, vy) in raw-canvas pixels, padded with zeros
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RSQB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u32,
    pub sequences: u32,
    pub frames: u32,
    pub height: u32,
    pub width: u32,
    pub max_balls: u32,
}

impl DatasetHeader {
    pub fn frame_len(&self) -> usize {
        self.height as usize * self.width as usize
    }

    fn record_len(&self) -> usize {
        let t = self.frames as usize;
        let m = self.max_balls as usize;
        1 + t * self.frame_len() + t * m + t * m * 4 * 4
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub balls: u8,
    /// `T×H×W` quantized intensities.
    pub frames: Vec<u8>,
    /// `T×max_balls` flags.
    pub collisions: Vec<u8>,
    /// `T×max_balls×4` values.
    pub trajectories: Vec<f32>,
}

impl SequenceRecord {
    pub fn frame(&self, header: &DatasetHeader, t: usize) -> &[u8] {
        let n = header.frame_len();
        &self.frames[t * n..(t + 1) * n]
    }

    /// Frame `t` as intensities in [0, 1].
    pub fn frame_f32(&self, header: &DatasetHeader, t: usize) -> Vec<f32> {
        self.frame(header, t).iter().map(|&v| f32::from(v) / 255.0).collect()
    }

    pub fn colliding(&self, header: &DatasetHeader, t: usize, ball: usize) -> bool {
        self.collisions[t * header.max_balls as usize + ball] != 0
    }

    /// `(x, y, vx, vy)` of `ball` at frame `t`.
    pub fn ball_state(&self, header: &DatasetHeader, t: usize, ball: usize) -> [f32; 4] {
        let base = (t * header.max_balls as usize + ball) * 4;
        let s = &self.trajectories[base..base + 4];
        [s[0], s[1], s[2], s[3]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub sequences: Vec<SequenceRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let h = &self.header;
        if h.sequences as usize != self.sequences.len() {
            return Err(Error::Format(format!(
                "header announces {} sequences, have {}",
                h.sequences,
                self.sequences.len()
            )));
        }
        w.write_all(MAGIC)?;
        for v in [h.version, h.sequences, h.frames, h.height, h.width, h.max_balls] {
            w.write_all(&v.to_le_bytes())?;
        }
        let t = h.frames as usize;
        let m = h.max_balls as usize;
        for (i, s) in self.sequences.iter().enumerate() {
            if s.frames.len() != t * h.frame_len()
                || s.collisions.len() != t * m
                || s.trajectories.len() != t * m * 4
                || u32::from(s.balls) > h.max_balls
            {
                return Err(Error::Format(format!("sequence {i} does not match the header shape")));
            }
            w.write_all(&[s.balls])?;
            w.write_all(&s.frames)?;
            w.write_all(&s.collisions)?;
            for v in &s.trajectories {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn read_header(path: &Path) -> Result<DatasetHeader> {
        let mut r = BufReader::new(File::open(path)?);
        read_header(&mut r)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let header = read_header(r)?;
        let t = header.frames as usize;
        let m = header.max_balls as usize;
        let mut buf = vec![0u8; header.record_len()];
        let mut sequences = Vec::with_capacity(header.sequences as usize);
        for i in 0..header.sequences {
            r.read_exact(&mut buf)
                .map_err(|e| Error::Format(format!("sequence {i}: {e}")))?;
            let balls = buf[0];
            if u32::from(balls) > header.max_balls {
                return Err(Error::Format(format!("sequence {i} claims {balls} balls")));
            }
            let f_end = 1 + t * header.frame_len();
            let c_end = f_end + t * m;
            let trajectories = buf[c_end..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            sequences.push(SequenceRecord {
                balls,
                frames: buf[1..f_end].to_vec(),
                collisions: buf[f_end..c_end].to_vec(),
                trajectories,
            });
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::Format("trailing bytes after last sequence".into()));
        }
        Ok(Self { header, sequences })
    }
}

fn read_header<R: Read>(r: &mut R) -> Result<DatasetHeader> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut fields = [0u32; 6];
    for f in &mut fields {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *f = u32::from_le_bytes(b);
    }
    let header = DatasetHeader {
        version: fields[0],
        sequences: fields[1],
        frames: fields[2],
        height: fields[3],
        width: fields[4],
        max_balls: fields[5],
    };
    if header.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {}", header.version)));
    }
    Ok(header)
}
