#include "optode/usage_log.hpp"

#include <fstream>

#include "optode/common.hpp"

namespace optode::eval {

void UsageLog::save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw DataError("UsageLog: cannot open " + path);
    f << "sequence,day,frame,role\n";
    for (const Entry& e : entries())
        f << e.sequence << ',' << e.day << ',' << e.frame << ',' << role_name(e.role)
          << '\n';
}

}  // namespace optode::eval
