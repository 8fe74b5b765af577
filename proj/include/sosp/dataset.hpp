#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace sosp {

struct Dataset {
  int channels = 0, height = 0, width = 0;
  int classes = 0;
  std::vector<double> x;  // n * channels*height*width
  std::vector<int> y;     // labels in [0, classes)

  int size() const { return static_cast<int>(y.size()); }
  int sample_size() const { return channels * height * width; }
  const double* sample(int i) const { return x.data() + std::size_t(i) * sample_size(); }
};

struct SynthConfig {
  int classes = 4;
  int channels = 3;
  int height = 8;
  int width = 8;
  int n = 2000;
  double noise = 0.3;
  std::uint64_t seed = 1;
};

// Class-template images: each class gets a fixed random pattern; samples are
// amplitude-jittered templates plus Gaussian pixel noise.
Dataset make_synthetic(const SynthConfig& cfg);

// two Gaussian blobs with a positive margin along a random direction
// (linearly separable); labels 0/1
Dataset make_two_blobs(int n, int dim, double margin, std::uint64_t seed);

Dataset gather(const Dataset& d, const std::vector<int>& idx);

// flat binary container: magic, version, dims, labels, float64 pixels
void save_dataset(const Dataset& d, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace sosp
