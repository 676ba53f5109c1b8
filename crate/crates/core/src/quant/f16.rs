use half::f16;

use super::QuantError;
use crate::graph_opt;
use crate::model::{Checkpoint, DType, Graph, QuantParams, TensorData};

/// Optimizes the checkpoint for deployment and stores every weight as F16.
pub fn quantize_f16(ckpt: &Checkpoint) -> Result<Graph, QuantError> {
    to_f16_graph(&graph_opt::optimize(ckpt))
}

/// Converts the F32 tensors of an already optimized graph to F16 with
/// round-to-nearest-even. F16 tensors carry unit quantization parameters.
pub fn to_f16_graph(graph: &Graph) -> Result<Graph, QuantError> {
    let mut g = graph.clone();
    for (name, t) in g.tensors.iter_mut() {
        let TensorData::F32(v) = &t.data else {
            if t.dtype() == DType::F16 {
                continue;
            }
            return Err(QuantError::NotFloat(name.clone()));
        };
        if let Some(&bad) = v.iter().find(|x| x.abs() > f16::MAX.to_f32()) {
            return Err(QuantError::F16Overflow { tensor: name.clone(), value: bad });
        }
        t.data = TensorData::F16(v.iter().map(|&x| f16::from_f32(x)).collect());
        t.quant = Some(QuantParams::per_tensor(1.0, 0));
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builders::tiny_classifier;

    #[test]
    fn conversion_is_exact_for_powers_of_two_and_nearest_otherwise() {
        let mut g = tiny_classifier(4, 0);
        let w = g.tensors.get_mut("logits/kernel").unwrap().as_f32_mut().unwrap();
        w[0] = 1.0;
        w[1] = 0.1;
        let h = to_f16_graph(&g).unwrap();
        h.validate().unwrap();
        let TensorData::F16(v) = &h.tensors["logits/kernel"].data else { panic!() };
        assert_eq!(v[0].to_f32(), 1.0);
        // 0.1 lies between 0x2E66 (0.0999755859375) and 0x2E67 (0.10003662109375).
        assert_eq!(v[1].to_bits(), 0x2E66);
    }

    #[test]
    fn overflow_names_the_tensor() {
        let mut g = tiny_classifier(4, 0);
        g.tensors.get_mut("fc/bias").unwrap().as_f32_mut().unwrap()[0] = 70000.0;
        match to_f16_graph(&g) {
            Err(QuantError::F16Overflow { tensor, .. }) => assert_eq!(tensor, "fc/bias"),
            other => panic!("{other:?}"),
        }
    }
}
