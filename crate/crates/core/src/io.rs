//! Tensor file I/O and PGM export.
//!
//! Tensor format (`LGT1`): magic bytes `LGT1`, little-endian u32 ndim,
//! ndim little-endian u32 dims, then `product(dims)` little-endian IEEE-754
//! f32 values. Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

const MAGIC: &[u8; 4] = b"LGT1";

pub fn save_tensor(path: &Path, dims: &[u32], data: &[f32]) -> Result<()> {
    let expect: u64 = dims.iter().map(|&d| u64::from(d)).product();
    if expect != data.len() as u64 {
        return Err(Error::Dimension(format!(
            "tensor payload has {} values but dims {:?} require {}",
            data.len(),
            dims,
            expect
        )));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let ioerr = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(ioerr)?;
    w.write_all(&(dims.len() as u32).to_le_bytes()).map_err(|e| Error::io(path, e))?;
    for &d in dims {
        w.write_all(&d.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<(Vec<u32>, Vec<f32>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("bad magic {:?}, expected {:?}", magic, MAGIC),
        });
    }

    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
    let ndim = u32::from_le_bytes(u32buf) as usize;
    if ndim > 8 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("implausible ndim {ndim}"),
        });
    }

    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
        dims.push(u32::from_le_bytes(u32buf));
    }
    let count: u64 = dims.iter().map(|&d| u64::from(d)).product();

    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    if payload.len() as u64 != count * 4 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!(
                "payload is {} bytes but dims {:?} require {}",
                payload.len(),
                dims,
                count * 4
            ),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((dims, data))
}

/// Save a stack of equally sized images as one `[n, h, w]` tensor.
pub fn save_image_stack(path: &Path, images: &[Image]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("cannot save an empty image stack".into()));
    }
    let (h, w) = (images[0].height(), images[0].width());
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(Error::Dimension("image stack has mixed dimensions".into()));
        }
        data.extend(img.pixels().iter().map(|&p| p as f32));
    }
    save_tensor(path, &[images.len() as u32, h as u32, w as u32], &data)
}

pub fn load_image_stack(path: &Path) -> Result<Vec<Image>> {
    let (dims, data) = load_tensor(path)?;
    if dims.len() != 3 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected 3-D image stack, got dims {:?}", dims),
        });
    }
    let (n, h, w) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let slice = &data[i * h * w..(i + 1) * h * w];
        images.push(Image::new(w, h, slice.iter().map(|&v| f64::from(v)).collect())?);
    }
    Ok(images)
}

/// Export an image as PGM, maxval 255. Intensities are clamped to [0, 1]
/// and rounded half away from zero; this is the only place the pipeline
/// clamps pixel values.
pub fn write_pgm(path: &Path, img: &Image, binary: bool) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let levels: Vec<u8> = img
        .pixels()
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    if binary {
        write!(w, "P5\n{} {}\n255\n", img.width(), img.height()).map_err(|e| Error::io(path, e))?;
        w.write_all(&levels).map_err(|e| Error::io(path, e))?;
    } else {
        write!(w, "P2\n{} {}\n255\n", img.width(), img.height()).map_err(|e| Error::io(path, e))?;
        for row in levels.chunks(img.width()) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(" ")).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
