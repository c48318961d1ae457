#ifndef FDR_FDR_HPP
#define FDR_FDR_HPP

#include "fdr/deform.hpp"
#include "fdr/error.hpp"
#include "fdr/fitloss.hpp"
#include "fdr/flow.hpp"
#include "fdr/fourier.hpp"
#include "fdr/image.hpp"
#include "fdr/image_io.hpp"
#include "fdr/mesh.hpp"
#include "fdr/metrics.hpp"
#include "fdr/rng.hpp"
#include "fdr/testpage.hpp"
#include "fdr/tps.hpp"

#endif  // FDR_FDR_HPP
